#include "persa/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "persa/hash.hpp"

namespace persa {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written in native little-endian order");

namespace {
constexpr const char* kMagic = "PERSA-CKPT 1";
}

void Checkpoint::add(std::string name, std::string section, const ad::Tensor& tensor) {
  entries.push_back({std::move(name), std::move(section), tensor, tensor.requires_grad()});
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

const ad::Tensor& Checkpoint::get(const std::string& name) const {
  const CheckpointEntry* e = find(name);
  if (!e) throw std::runtime_error("checkpoint: no tensor named '" + name + "'");
  return e->tensor;
}

void Checkpoint::save(const std::string& path) const {
  nlohmann::json index = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : entries) {
    index.push_back({{"name", e.name},
                     {"section", e.section},
                     {"shape", e.tensor.shape()},
                     {"offset", offset},
                     {"trainable", e.trainable}});
    offset += e.tensor.numel();
  }
  const nlohmann::json header = {{"config", config}, {"meta", meta}, {"tensors", index}};
  const std::string header_text = header.dump();
  std::string payload;
  payload.reserve(offset * sizeof(double));
  for (const auto& e : entries) {
    const auto data = e.tensor.data();
    payload.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(double));
  }
  const std::string checksum = sha256_hex(header_text + payload);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out << kMagic << '\n' << header_text.size() << '\n' << header_text << payload
      << "\nsha256 " << checksum << '\n';
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  std::string magic;
  std::getline(in, magic);
  if (magic != kMagic) throw std::runtime_error("checkpoint: bad magic in " + path);
  std::string len_line;
  std::getline(in, len_line);
  const std::size_t header_len = std::stoull(len_line);
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  const nlohmann::json header = nlohmann::json::parse(header_text);
  std::size_t total = 0;
  for (const auto& t : header.at("tensors")) {
    total += ad::numel(t.at("shape").get<ad::Shape>());
  }
  std::string payload(total * sizeof(double), '\0');
  in.read(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!in) throw std::runtime_error("checkpoint: truncated payload in " + path);
  std::string trailer;
  std::getline(in, trailer);  // rest of the payload line (empty)
  std::getline(in, trailer);
  const std::string expected = "sha256 " + sha256_hex(header_text + payload);
  if (trailer != expected) throw std::runtime_error("checkpoint: checksum mismatch in " + path);

  Checkpoint ckpt;
  ckpt.config = header.at("config");
  ckpt.meta = header.at("meta");
  for (const auto& t : header.at("tensors")) {
    ad::Shape shape = t.at("shape").get<ad::Shape>();
    const std::size_t n = ad::numel(shape);
    const std::size_t offset = t.at("offset").get<std::size_t>();
    std::vector<double> values(n);
    std::memcpy(values.data(), payload.data() + offset * sizeof(double), n * sizeof(double));
    const bool trainable = t.at("trainable").get<bool>();
    ckpt.entries.push_back({t.at("name").get<std::string>(), t.at("section").get<std::string>(),
                            ad::Tensor(std::move(shape), std::move(values), trainable),
                            trainable});
  }
  return ckpt;
}

Checkpoint to_checkpoint(const PolicyModel& model) {
  Checkpoint ckpt;
  ckpt.config = model.to_json_meta();
  for (const auto& [name, w] : model.base_weights()) ckpt.add(name, "base", w);
  for (const auto& [name, lora] : model.adapters()) {
    ckpt.add(name + ".lora_A", "adapter", lora.A);
    ckpt.add(name + ".lora_B", "adapter", lora.B);
  }
  return ckpt;
}

PolicyModel policy_from_checkpoint(const Checkpoint& ckpt) {
  const ModelConfig config = ModelConfig::from_json(ckpt.config.at("model"));
  PolicyModel model(config);
  for (const auto& a : ckpt.config.at("adapters")) {
    const std::string target = a.at("target").get<std::string>();
    // Attach one target at a time, then overwrite with the stored values.
    const auto dot = target.find('.', 7);
    const int block = std::stoi(target.substr(7, dot - 7));
    const std::string kind = target.substr(target.rfind('.') + 1);
    LayerSelection sel;
    sel.block_indices = {block};
    sel.target_kinds = {target_kind_from_string(kind)};
    model.attach_lora(sel, a.at("rank").get<int>(), a.at("alpha").get<double>());
  }
  for (const auto& e : ckpt.entries) {
    ad::Tensor* dest = nullptr;
    if (e.section == "base") {
      dest = &model.weight(e.name);
    } else if (e.section == "adapter") {
      const bool is_a = e.name.ends_with(".lora_A");
      LoRAAdapter& lora = model.adapter(e.name.substr(0, e.name.size() - 7));
      dest = is_a ? &lora.A : &lora.B;
    } else {
      continue;
    }
    if (dest->shape() != e.tensor.shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for " + e.name);
    }
    *dest = ad::Tensor(e.tensor.shape(), {e.tensor.data().begin(), e.tensor.data().end()},
                       e.trainable);
  }
  return model;
}

}  // namespace persa
