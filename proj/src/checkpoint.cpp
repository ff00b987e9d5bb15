#include "tint/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"

namespace tint {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'T', 'I', 'N', 'T', 'B', 'L', 'O', 'B'};
constexpr std::uint32_t kByteOrderMark = 0x01020304u;
constexpr std::size_t kHeaderBytes = 16;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace

void write_tensor_bundle(const std::filesystem::path& dir, const NamedTensors& tensors,
                         const std::string& config_json, const std::string& format) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());

  std::string blob(kMagic, sizeof(kMagic));
  put_u32(blob, kByteOrderMark);
  put_u32(blob, static_cast<std::uint32_t>(kCheckpointVersion));

  json entries = json::array();
  for (const auto& [name, t] : tensors) {
    entries.push_back({{"name", name},
                       {"shape", t.shape()},
                       {"dtype", "f32"},
                       {"offset", blob.size()}});
    for (float v : t.values()) put_u32(blob, std::bit_cast<std::uint32_t>(v));
  }
  json manifest = {{"format", format},
                   {"version", kCheckpointVersion},
                   {"byte_order", "little"},
                   {"config", json::parse(config_json)},
                   {"tensors", entries}};
  write_file(dir / "weights.bin", blob);
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

TensorBundle read_tensor_bundle(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw IoError("corrupt manifest in " + dir.string() + ": " + e.what());
  }
  const std::string blob = read_file(dir / "weights.bin");
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  if (blob.size() < kHeaderBytes || std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError("weights.bin in " + dir.string() + " lacks the blob magic");
  }
  const std::uint32_t mark = get_u32(bytes + 8);
  if (mark != kByteOrderMark) {
    throw IoError(mark == 0x04030201u ? "weights.bin is big-endian; only little-endian is supported"
                                      : "weights.bin has an invalid byte-order mark");
  }

  TensorBundle bundle;
  try {
    const int version = manifest.at("version").get<int>();
    if (version != kCheckpointVersion || get_u32(bytes + 12) != static_cast<std::uint32_t>(version)) {
      throw IoError("unsupported checkpoint version " + std::to_string(version));
    }
    if (manifest.value("byte_order", "little") != "little") {
      throw IoError("manifest declares a non little-endian byte order");
    }
    bundle.format = manifest.at("format").get<std::string>();
    bundle.config_json = manifest.at("config").dump();
    for (const json& e : manifest.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<std::vector<std::size_t>>();
      const auto offset = e.at("offset").get<std::size_t>();
      if (e.at("dtype").get<std::string>() != "f32") {
        throw IoError("tensor '" + name + "' has unsupported dtype");
      }
      std::size_t count = 1;
      for (std::size_t d : shape) count *= d;
      if (offset < kHeaderBytes || offset + 4 * count > blob.size()) {
        throw IoError("tensor '" + name + "' extends past the end of weights.bin (truncated blob)");
      }
      std::vector<float> data(count);
      for (std::size_t i = 0; i < count; ++i) {
        data[i] = std::bit_cast<float>(get_u32(bytes + offset + 4 * i));
      }
      try {
        bundle.tensors.emplace_back(name, Tensor(shape, std::move(data)));
      } catch (const DimensionError& err) {
        throw IoError("tensor '" + name + "': " + err.what());
      }
    }
  } catch (const json::exception& e) {
    throw IoError("corrupt manifest in " + dir.string() + ": " + e.what());
  }
  return bundle;
}

std::string aux_config_to_json(const AuxConfig& c) {
  json j = {{"d_aux", c.d_aux},
            {"h_aux", c.h_aux},
            {"layers", c.layers},
            {"t_aux", c.t_aux},
            {"vocab", c.vocab},
            {"ln_kind", to_string(c.ln_kind)},
            {"pos_bias", to_string(c.pos_bias)},
            {"ffn_kind", to_string(c.ffn_kind)},
            {"activation", to_string(c.activation)}};
  return j.dump();
}

AuxConfig aux_config_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    AuxConfig c;
    c.d_aux = j.at("d_aux").get<std::size_t>();
    c.h_aux = j.at("h_aux").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.t_aux = j.at("t_aux").get<std::size_t>();
    c.vocab = j.at("vocab").get<std::size_t>();
    c.ln_kind = parse_norm_kind(j.at("ln_kind").get<std::string>());
    c.pos_bias = parse_pos_bias(j.at("pos_bias").get<std::string>());
    c.ffn_kind = parse_ffn_kind(j.at("ffn_kind").get<std::string>());
    c.activation = parse_activation(j.at("activation").get<std::string>());
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw IoError(std::string("corrupt config block: ") + e.what());
  }
}

void write_checkpoint(const std::filesystem::path& dir, const AuxModel& model) {
  NamedTensors tensors;
  model.for_each_tensor(
      [&](const std::string& name, const Tensor& t) { tensors.emplace_back(name, t); });
  write_tensor_bundle(dir, tensors, aux_config_to_json(model.config), "tint-aux-model");
}

AuxModel read_checkpoint(const std::filesystem::path& dir) {
  TensorBundle bundle = read_tensor_bundle(dir);
  if (bundle.format != "tint-aux-model") {
    throw IoError("checkpoint format '" + bundle.format + "' is not an auxiliary model");
  }
  AuxModel model;
  try {
    model = make_zero_model(aux_config_from_json(bundle.config_json));
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint config invalid: ") + e.what());
  }
  std::map<std::string, Tensor*> slots;
  model.for_each_tensor([&](const std::string& name, Tensor& t) { slots[name] = &t; });
  std::map<std::string, bool> seen;
  for (auto& [name, t] : bundle.tensors) {
    auto it = slots.find(name);
    if (it == slots.end()) throw IoError("checkpoint has unexpected tensor '" + name + "'");
    if (it->second->shape() != t.shape()) {
      throw IoError("tensor '" + name + "' has shape " + t.shape_str() + ", expected " +
                    it->second->shape_str());
    }
    *it->second = std::move(t);
    seen[name] = true;
  }
  for (const auto& [name, slot] : slots) {
    if (!seen.count(name)) throw IoError("checkpoint is missing tensor '" + name + "'");
  }
  return model;
}

}  // namespace tint
