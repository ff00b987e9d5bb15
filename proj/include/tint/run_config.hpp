#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "tint/aux_model.hpp"
#include "tint/tint_builder.hpp"

namespace tint {

// Flat key = value configuration shared by every CLI command.
struct RunConfig {
  AuxConfig aux;
  TinTConfig tint;
  std::uint64_t seed = 0;
  std::size_t length = 0;  // tokens drawn when no token file is given; 0 = t_aux
  std::size_t split = 0;   // r; 0 = two thirds of the sequence
  std::vector<std::string> checks;  // verify selection; empty = full matrix

  std::size_t resolved_length() const { return length == 0 ? aux.t_aux : length; }
  std::size_t resolved_split(std::size_t tokens) const {
    return split == 0 ? std::max<std::size_t>(1, tokens * 2 / 3) : split;
  }
  // Validates every numeric invariant; throws ConfigError.
  void validate() const;
  // Stable one-line description of the settings, used in reports.
  std::string fingerprint() const;
};

std::vector<std::string> preset_names();
// toy-8, toy-16 and shape-only presets of the OPT family. Throws ConfigError.
RunConfig preset(std::string_view name);

// Throws ConfigError for unknown keys and malformed values.
void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value);
// Lines of `key = value`; '#' starts a comment.
RunConfig parse_config_text(std::string_view text, RunConfig base);
// Throws IoError when the file cannot be read.
RunConfig load_config_file(const std::filesystem::path& path, RunConfig base);

// Whitespace-separated token ids. Throws IoError or ConfigError.
std::vector<std::uint32_t> read_token_file(const std::filesystem::path& path);

}  // namespace tint
