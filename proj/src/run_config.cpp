#include "tint/run_config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "tint/errors.hpp"

namespace tint {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const char* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config: key '" + std::string(key) + "' expects a number, got '" +
                      std::string(v) + "'");
  }
  return out;
}

std::size_t parse_size(std::string_view key, std::string_view v) {
  return parse_number<std::size_t>(key, v);
}

float parse_real(std::string_view key, std::string_view v) {
  const float f = parse_number<float>(key, v);
  if (!std::isfinite(f)) throw ConfigError("config: key '" + std::string(key) + "' is not finite");
  return f;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: key '" + std::string(key) + "' expects true or false");
}

std::vector<std::string> split_list(std::string_view v) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const std::size_t comma = v.find(',', start);
    const std::string_view item =
        trim(v.substr(start, comma == std::string_view::npos ? v.size() - start : comma - start));
    if (!item.empty()) out.emplace_back(item);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

using Setter = std::function<void(RunConfig&, std::string_view, std::string_view)>;

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"d_aux", [](RunConfig& c, auto k, auto v) { c.aux.d_aux = parse_size(k, v); }},
      {"h_aux", [](RunConfig& c, auto k, auto v) { c.aux.h_aux = parse_size(k, v); }},
      {"layers", [](RunConfig& c, auto k, auto v) { c.aux.layers = parse_size(k, v); }},
      {"t_aux", [](RunConfig& c, auto k, auto v) { c.aux.t_aux = parse_size(k, v); }},
      {"vocab", [](RunConfig& c, auto k, auto v) { c.aux.vocab = parse_size(k, v); }},
      {"ln_kind", [](RunConfig& c, auto, auto v) { c.aux.ln_kind = parse_norm_kind(v); }},
      {"pos_bias", [](RunConfig& c, auto, auto v) { c.aux.pos_bias = parse_pos_bias(v); }},
      {"ffn_kind", [](RunConfig& c, auto, auto v) { c.aux.ffn_kind = parse_ffn_kind(v); }},
      {"activation", [](RunConfig& c, auto, auto v) { c.aux.activation = parse_activation(v); }},
      {"stack", [](RunConfig& c, auto k, auto v) { c.tint.stack = parse_size(k, v); }},
      {"eps_ln", [](RunConfig& c, auto k, auto v) { c.tint.eps_ln = parse_real(k, v); }},
      {"eps_act", [](RunConfig& c, auto k, auto v) { c.tint.eps_act = parse_real(k, v); }},
      {"eps_glu", [](RunConfig& c, auto k, auto v) { c.tint.eps_glu = parse_real(k, v); }},
      {"eta", [](RunConfig& c, auto k, auto v) { c.tint.eta = parse_real(k, v); }},
      {"steps", [](RunConfig& c, auto k, auto v) { c.tint.steps = parse_size(k, v); }},
      {"top_layers", [](RunConfig& c, auto k, auto v) { c.tint.top_layers = parse_size(k, v); }},
      {"loss_mode", [](RunConfig& c, auto, auto v) { c.tint.loss.mode = parse_loss_mode(v); }},
      {"loss_format",
       [](RunConfig& c, auto, auto v) { c.tint.loss.format = parse_loss_format(v); }},
      {"exemplar_lengths",
       [](RunConfig& c, auto k, auto v) {
         c.tint.loss.exemplar_lengths.clear();
         for (const std::string& item : split_list(v))
           c.tint.loss.exemplar_lengths.push_back(parse_size(k, item));
       }},
      {"label_len", [](RunConfig& c, auto k, auto v) { c.tint.loss.label_len = parse_size(k, v); }},
      {"aux_mask", [](RunConfig& c, auto, auto v) { c.tint.aux_mask = parse_aux_mask(v); }},
      {"bias_token", [](RunConfig& c, auto k, auto v) { c.tint.bias_token = parse_bool(k, v); }},
      {"max_depth", [](RunConfig& c, auto k, auto v) { c.tint.max_depth = parse_size(k, v); }},
      {"seed", [](RunConfig& c, auto k, auto v) { c.seed = parse_number<std::uint64_t>(k, v); }},
      {"length", [](RunConfig& c, auto k, auto v) { c.length = parse_size(k, v); }},
      {"split", [](RunConfig& c, auto k, auto v) { c.split = parse_size(k, v); }},
      {"checks", [](RunConfig& c, auto, auto v) { c.checks = split_list(v); }},
  };
  return table;
}

}  // namespace

void RunConfig::validate() const {
  aux.validate();
  tint.validate(aux);
  if (length > aux.t_aux) {
    throw ConfigError("config: length=" + std::to_string(length) + " exceeds t_aux=" +
                      std::to_string(aux.t_aux));
  }
  const std::size_t T = resolved_length();
  if (T < 2) throw ConfigError("config: at least two tokens are required");
  const std::size_t r = resolved_split(T);
  if (r < 1 || r >= T) {
    throw ConfigError("config: split=" + std::to_string(r) + " must satisfy 1 <= split < " +
                      std::to_string(T));
  }
}

std::string RunConfig::fingerprint() const {
  std::ostringstream os;
  os << "D=" << aux.d_aux << ",H=" << aux.h_aux << ",L=" << aux.layers << ",T_aux=" << aux.t_aux
     << ",V=" << aux.vocab << "," << to_string(aux.ln_kind) << "," << to_string(aux.pos_bias)
     << "," << to_string(aux.ffn_kind) << "," << to_string(aux.activation)
     << ",S=" << tint.stack << ",eta=" << tint.eta << ",N=" << tint.steps
     << ",top=" << tint.top_layers << "," << to_string(tint.loss.mode) << ","
     << to_string(tint.loss.format) << "," << to_string(tint.aux_mask) << ",seed=" << seed;
  return os.str();
}

std::vector<std::string> preset_names() {
  return {"toy-8", "toy-16", "opt125m", "opt350m", "opt1.3b", "opt2.7b"};
}

RunConfig preset(std::string_view name) {
  RunConfig c;
  c.tint.stack = 4;
  c.tint.bias_token = true;
  auto opt = [&](std::size_t layers, std::size_t d, std::size_t h) {
    c.aux.layers = layers;
    c.aux.d_aux = d;
    c.aux.h_aux = h;
    c.aux.t_aux = 2048;
    c.aux.vocab = 50272;
    c.aux.ln_kind = NormKind::layernorm;
    c.aux.pos_bias = PosBias::none;
    c.aux.ffn_kind = FfnKind::mlp;
    c.aux.activation = Activation::relu;
    c.tint.bias_token = false;  // K = D_aux / S as in the published counts
  };
  if (name == "toy-8") {
    c.aux = AuxConfig{8, 4, 2, 16, 12};
    c.length = 8;
    c.split = 5;
  } else if (name == "toy-16") {
    c.aux = AuxConfig{16, 4, 2, 16, 16};
    c.length = 12;
    c.split = 8;
  } else if (name == "opt125m") {
    opt(12, 768, 12);
  } else if (name == "opt350m") {
    opt(24, 1024, 16);
  } else if (name == "opt1.3b") {
    opt(24, 2048, 16);
  } else if (name == "opt2.7b") {
    opt(32, 2560, 16);
  } else {
    std::string known;
    for (const std::string& n : preset_names()) known += " " + n;
    throw ConfigError("unknown preset '" + std::string(name) + "'; known:" + known);
  }
  return c;
}

void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value) {
  const auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("config: unknown key '" + std::string(key) + "'");
  it->second(cfg, key, value);
}

RunConfig parse_config_text(std::string_view text, RunConfig base) {
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    apply_setting(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

RunConfig load_config_file(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), std::move(base));
}

std::vector<std::uint32_t> read_token_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read token file " + path.string());
  std::vector<std::uint32_t> out;
  std::string word;
  while (in >> word) out.push_back(parse_number<std::uint32_t>("tokens", word));
  if (out.empty()) throw ConfigError("token file " + path.string() + " holds no tokens");
  return out;
}

}  // namespace tint
