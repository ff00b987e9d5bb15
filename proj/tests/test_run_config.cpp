#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "tint/errors.hpp"
#include "tint/run_config.hpp"

namespace tint {
namespace {

TEST(RunConfig, PresetsValidate) {
  for (const std::string& name : preset_names()) {
    const RunConfig c = preset(name);
    EXPECT_NO_THROW(c.validate()) << name;
  }
  EXPECT_THROW(preset("opt6.7b"), ConfigError);
}

TEST(RunConfig, ToyPresetShapes) {
  const RunConfig c = preset("toy-16");
  EXPECT_EQ(c.aux.d_aux, 16u);
  EXPECT_EQ(c.aux.h_aux, 4u);
  EXPECT_EQ(c.tint.stack, 4u);
  EXPECT_EQ(c.resolved_length(), 12u);
  EXPECT_EQ(c.resolved_split(12), 8u);
  const RunConfig opt = preset("opt125m");
  EXPECT_EQ(opt.aux.d_aux, 768u);
  EXPECT_EQ(opt.aux.layers, 12u);
  EXPECT_FALSE(opt.tint.bias_token);
}

TEST(RunConfig, ParsesKeysCommentsAndLists) {
  const RunConfig c = parse_config_text(
      "# toy run\n"
      "d_aux = 8\n"
      "  eta=0.25   # trailing comment\n"
      "\n"
      "loss_mode = full_context\n"
      "loss_format = single\n"
      "exemplar_lengths = 3, 4\n"
      "bias_token = false\n"
      "ffn_kind = glu\n"
      "checks = ln_firstorder,e2e_oracle\n"
      "seed = 18446744073709551615\n",
      preset("toy-16"));
  EXPECT_EQ(c.aux.d_aux, 8u);
  EXPECT_FLOAT_EQ(c.tint.eta, 0.25f);
  EXPECT_EQ(c.tint.loss.mode, LossMode::full_context);
  EXPECT_EQ(c.tint.loss.format, LossFormat::single);
  EXPECT_EQ(c.tint.loss.exemplar_lengths, (std::vector<std::size_t>{3, 4}));
  EXPECT_FALSE(c.tint.bias_token);
  EXPECT_EQ(c.aux.ffn_kind, FfnKind::glu);
  EXPECT_EQ(c.checks, (std::vector<std::string>{"ln_firstorder", "e2e_oracle"}));
  EXPECT_EQ(c.seed, 18446744073709551615ull);
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
  const RunConfig base = preset("toy-16");
  EXPECT_THROW(parse_config_text("colour = blue\n", base), ConfigError);
  EXPECT_THROW(parse_config_text("d_aux = sixteen\n", base), ConfigError);
  EXPECT_THROW(parse_config_text("d_aux = -4\n", base), ConfigError);
  EXPECT_THROW(parse_config_text("eta = 0.1x\n", base), ConfigError);
  EXPECT_THROW(parse_config_text("eta = inf\n", base), ConfigError);
  EXPECT_THROW(parse_config_text("bias_token = maybe\n", base), ConfigError);
  EXPECT_THROW(parse_config_text("ln_kind = batchnorm\n", base), ConfigError);
  EXPECT_THROW(parse_config_text("just a line\n", base), ConfigError);
}

TEST(RunConfig, ValidateChecksInvariants) {
  RunConfig c = preset("toy-16");
  c.split = 12;
  EXPECT_THROW(c.validate(), ConfigError);
  c = preset("toy-16");
  c.length = 17;
  EXPECT_THROW(c.validate(), ConfigError);
  c = preset("toy-16");
  c.aux.d_aux = 10;  // not divisible by h_aux
  EXPECT_THROW(c.validate(), ConfigError);
  c = preset("toy-16");
  c.tint.stack = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(RunConfig, FingerprintIsStableAndSensitive) {
  RunConfig a = preset("toy-16"), b = preset("toy-16");
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  b.seed = 7;
  EXPECT_NE(a.fingerprint(), b.fingerprint());
}

TEST(RunConfig, FilesAndTokens) {
  const auto dir = std::filesystem::temp_directory_path() / "tint_run_config_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream(dir / "run.cfg") << "steps = 2\n";
    std::ofstream(dir / "tokens.txt") << "1 2\n3\t4\n";
    std::ofstream(dir / "empty.txt") << "\n";
    std::ofstream(dir / "bad.txt") << "1 two\n";
  }
  EXPECT_EQ(load_config_file(dir / "run.cfg", preset("toy-8")).tint.steps, 2u);
  EXPECT_THROW(load_config_file(dir / "missing.cfg", preset("toy-8")), IoError);
  EXPECT_EQ(read_token_file(dir / "tokens.txt"), (std::vector<std::uint32_t>{1, 2, 3, 4}));
  EXPECT_THROW(read_token_file(dir / "missing.txt"), IoError);
  EXPECT_THROW(read_token_file(dir / "empty.txt"), ConfigError);
  EXPECT_THROW(read_token_file(dir / "bad.txt"), ConfigError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace tint
