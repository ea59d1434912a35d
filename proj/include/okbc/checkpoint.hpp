#pragma once

// Checkpoint directory layout:
//   manifest.json  -- format_version, model, encoder, dim, n_entities,
//                     n_relations, conve_reshape, words[], seed
//   tensors.bin    -- records: u32 LE name length, UTF-8 name, u8 rank,
//                     u32 LE extents, raw LE float32 data, row-major
// Reload then re-serialize is byte-identical.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "okbc/model.hpp"

namespace okbc {

inline constexpr int kCheckpointFormatVersion = 1;

struct CheckpointTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

struct CheckpointData {
  int format_version = kCheckpointFormatVersion;
  ModelKind model = ModelKind::tucker;
  EncoderKind encoder = EncoderKind::noencoder;
  int dim = 0;
  int n_entities = 0;
  int n_relations = 0;
  std::optional<std::pair<int, int>> conve_reshape;
  uint64_t seed = 0;
  std::vector<std::string> words;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
  }

  bool has_tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return true;
    return false;
  }
};

namespace detail {

inline void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& buf, float f) {
  put_u32(buf, std::bit_cast<uint32_t>(f));
}

struct ByteReader {
  const std::string& buf;
  size_t pos = 0;

  uint8_t u8() {
    if (pos + 1 > buf.size()) throw std::runtime_error("tensors.bin: truncated record");
    return static_cast<uint8_t>(buf[pos++]);
  }
  uint32_t u32() {
    if (pos + 4 > buf.size()) throw std::runtime_error("tensors.bin: truncated record");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(size_t n) {
    if (pos + n > buf.size()) throw std::runtime_error("tensors.bin: truncated record");
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  bool done() const { return pos == buf.size(); }
};

}  // namespace detail

template <class T>
void save_checkpoint(KbcModel<T>& model, const std::string& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["model"] = to_string(model.model_kind);
  manifest["encoder"] = to_string(model.encoder_kind);
  manifest["dim"] = model.dim;
  manifest["n_entities"] = model.n_entities;
  manifest["n_relations"] = model.n_relations;
  if (const auto* c = std::get_if<ConvET<T>>(&model.scorer))
    manifest["conve_reshape"] = {c->rows, c->cols};
  else
    manifest["conve_reshape"] = nullptr;
  manifest["seed"] = model.seed;
  manifest["words"] = model.words;
  {
    std::ofstream out(dir + "/manifest.json", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + dir + "/manifest.json");
    out << manifest.dump(2) << "\n";
  }
  std::string buf;
  for (auto& [name, tensor] : model.state_tensors()) {
    detail::put_u32(buf, static_cast<uint32_t>(name.size()));
    buf += name;
    buf.push_back(static_cast<char>(tensor.rank()));
    for (int e : tensor.shape) detail::put_u32(buf, static_cast<uint32_t>(e));
    for (T v : *tensor.data) detail::put_f32(buf, static_cast<float>(v));
  }
  std::ofstream out(dir + "/tensors.bin", std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + dir + "/tensors.bin");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline CheckpointData load_checkpoint(const std::string& dir) {
  CheckpointData ck;
  {
    std::ifstream in(dir + "/manifest.json", std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + dir + "/manifest.json");
    nlohmann::json manifest = nlohmann::json::parse(in);
    ck.format_version = manifest.at("format_version").get<int>();
    if (ck.format_version != kCheckpointFormatVersion)
      throw std::runtime_error("checkpoint format version " +
                               std::to_string(ck.format_version) + " is not supported (expected " +
                               std::to_string(kCheckpointFormatVersion) + ")");
    ck.model = parse_model_kind(manifest.at("model").get<std::string>());
    ck.encoder = parse_encoder_kind(manifest.at("encoder").get<std::string>());
    ck.dim = manifest.at("dim").get<int>();
    ck.n_entities = manifest.at("n_entities").get<int>();
    ck.n_relations = manifest.at("n_relations").get<int>();
    ck.seed = manifest.at("seed").get<uint64_t>();
    if (!manifest.at("conve_reshape").is_null()) {
      auto rs = manifest.at("conve_reshape");
      ck.conve_reshape = std::make_pair(rs.at(0).get<int>(), rs.at(1).get<int>());
    }
    ck.words = manifest.at("words").get<std::vector<std::string>>();
  }
  std::string buf;
  {
    std::ifstream in(dir + "/tensors.bin", std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + dir + "/tensors.bin");
    std::ostringstream ss;
    ss << in.rdbuf();
    buf = ss.str();
  }
  detail::ByteReader r{buf};
  while (!r.done()) {
    CheckpointTensor t;
    uint32_t name_len = r.u32();
    t.name = r.bytes(name_len);
    uint8_t rank = r.u8();
    size_t n = 1;
    for (int i = 0; i < rank; ++i) {
      uint32_t e = r.u32();
      if (e == 0) throw std::runtime_error("tensors.bin: zero extent in '" + t.name + "'");
      t.shape.push_back(static_cast<int>(e));
      n *= e;
    }
    t.data.resize(n);
    for (size_t i = 0; i < n; ++i) t.data[i] = r.f32();
    for (const auto& prev : ck.tensors)
      if (prev.name == t.name)
        throw std::runtime_error("tensors.bin: duplicate tensor '" + t.name + "'");
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

// Rebuilds a model from a checkpoint against a store with matching item
// counts; tensors are matched by name and must cover the expected set.
template <class T>
KbcModel<T> model_from_checkpoint(const CheckpointData& ck, const TripleStore& store) {
  if (store.n_entities() != ck.n_entities || store.n_relations() != ck.n_relations)
    throw std::runtime_error(
        "checkpoint was built for " + std::to_string(ck.n_entities) + " entities / " +
        std::to_string(ck.n_relations) + " relations, store has " +
        std::to_string(store.n_entities()) + " / " + std::to_string(store.n_relations()));
  ModelSpec spec;
  spec.model = ck.model;
  spec.encoder = ck.encoder;
  spec.dim = ck.dim;
  spec.seed = ck.seed;
  if (ck.encoder == EncoderKind::gru) {
    const CheckpointTensor& we = ck.tensor("entity_encoder.word_emb");
    if (we.shape.size() != 2) throw std::runtime_error("checkpoint: word_emb shape drift");
    spec.word_dim = we.shape[1];
  }
  KbcModel<T> model = build_model<T>(store, spec);
  if (ck.encoder == EncoderKind::gru) {
    // the checkpoint vocabulary is authoritative; the store must not add words
    int vocab_rows = std::max<int>(1, static_cast<int>(ck.words.size()));
    auto size_vocab = [&](EncoderVariant<T>& enc) {
      auto& g = std::get<GruEncoderT<T>>(enc);
      if (g.vocab() != vocab_rows)
        g.word_emb = TensorT<T>::zeros({vocab_rows, spec.word_dim}, true);
    };
    size_vocab(model.entity_encoder);
    size_vocab(model.relation_encoder);
    model.word_ids.clear();
    for (size_t i = 0; i < ck.words.size(); ++i)
      model.word_ids.emplace(ck.words[i], static_cast<int>(i));
    auto remap = [&](const std::vector<std::string>& names,
                     std::vector<std::vector<int>>& tokens) {
      tokens.clear();
      for (const std::string& n : names) {
        std::vector<int> ids;
        for (const std::string& w : tokenize(n)) {
          auto it = model.word_ids.find(w);
          if (it == model.word_ids.end())
            throw std::runtime_error("checkpoint vocabulary does not contain word '" + w +
                                     "' required by the store");
          ids.push_back(it->second);
        }
        tokens.push_back(std::move(ids));
      }
    };
    remap(store.entity_names, model.entity_tokens);
    remap(store.relation_names, model.relation_tokens);
    model.words = ck.words;
  }
  auto state = model.state_tensors();
  if (state.size() != ck.tensors.size())
    throw std::runtime_error("checkpoint holds " + std::to_string(ck.tensors.size()) +
                             " tensors, model expects " + std::to_string(state.size()));
  for (auto& [name, tensor] : state) {
    const CheckpointTensor& src = ck.tensor(name);
    if (src.shape != tensor.shape)
      throw std::runtime_error("checkpoint tensor '" + name + "' has shape " +
                               shape_str(src.shape) + ", expected " + shape_str(tensor.shape));
    for (size_t i = 0; i < src.data.size(); ++i) (*tensor.data)[i] = static_cast<T>(src.data[i]);
  }
  return model;
}

}  // namespace okbc
