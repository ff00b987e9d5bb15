#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "tint/checkpoint.hpp"
#include "tint/errors.hpp"
#include "tint/finetune.hpp"
#include "tint/run_config.hpp"
#include "tint/tint_builder.hpp"
#include "tint/verify.hpp"

namespace {

// Exit codes: 0 all pass, 1 check failure, 2 configuration or input error, 3 I/O error.
constexpr int kExitPass = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;

struct CommonOptions {
  std::string preset = "toy-16";
  std::string config_file;
  std::vector<std::string> settings;  // key=value overrides applied after the file
  std::uint64_t seed = 0;
  bool seed_given = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--preset", o.preset, "Starting preset")
      ->check(CLI::IsMember(tint::preset_names()));
  cmd->add_option("--config", o.config_file, "Flat key = value config file applied over the preset");
  cmd->add_option("--set", o.settings, "Extra key=value settings applied last");
  cmd->add_option_function<std::uint64_t>(
      "--seed",
      [&o](const std::uint64_t& s) {
        o.seed = s;
        o.seed_given = true;
      },
      "Seed for random weights and tokens");
}

tint::RunConfig resolve_config(const CommonOptions& o) {
  tint::RunConfig cfg = tint::preset(o.preset);
  if (!o.config_file.empty()) cfg = tint::load_config_file(o.config_file, cfg);
  for (const std::string& kv : o.settings) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw tint::ConfigError("--set expects key=value, got '" + kv + "'");
    tint::apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed_given) cfg.seed = o.seed;
  cfg.validate();
  return cfg;
}

// ---- count -------------------------------------------------------------------------------

std::string billions(std::uint64_t n) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << static_cast<double>(n) / 1e9 << "b";
  return os.str();
}

int cmd_count(const CommonOptions& o) {
  const tint::RunConfig cfg = resolve_config(o);
  const tint::ParamCount c = tint::count_params(cfg.aux, cfg.tint);
  std::cout << "config: " << cfg.fingerprint() << "\n";
  std::cout << "D_sim=" << c.d_sim << " H_sim=" << c.h_sim << " T_sim=" << c.t_sim
            << " prefix_tokens=" << c.prefix_tokens << " Q_split=" << c.q_split << " Q=" << c.q
            << "\n";
  auto row = [](const std::string& name, const tint::PhaseCount& p) {
    std::cout << std::left << std::setw(16) << name << std::right << std::setw(16) << p.forward
              << std::setw(16) << p.backward << std::setw(16) << p.descent << std::setw(16)
              << p.total() << "\n";
  };
  std::cout << std::left << std::setw(16) << "module" << std::right << std::setw(16) << "forward"
            << std::setw(16) << "backward" << std::setw(16) << "descent" << std::setw(16)
            << "total" << "\n";
  for (const tint::ModuleCountRow& r : c.rows) row(r.name, r.count);
  row("block", c.block);
  row("model", c.model);
  std::cout << "model: forward " << billions(c.model.forward) << ", backward "
            << billions(c.model.backward) << ", descent " << billions(c.model.descent)
            << ", total " << billions(c.model.total()) << "\n";
  std::cout << "closed form total " << c.closed_form << " (c1=" << c.c1 << " c2=" << c.c2
            << " c3=" << c.c3 << ")\n";
  return kExitPass;
}

// ---- build -------------------------------------------------------------------------------

struct ModelInputs {
  std::string checkpoint;
  std::string tokens;
};

tint::AuxModel load_model(const tint::RunConfig& cfg, const ModelInputs& in) {
  if (in.checkpoint.empty()) return tint::make_random_model(cfg.aux, cfg.seed);
  tint::AuxModel m = tint::read_checkpoint(in.checkpoint);
  if (!(m.config == cfg.aux)) {
    throw tint::ConfigError("checkpoint config (D=" + std::to_string(m.config.d_aux) + ", L=" +
                            std::to_string(m.config.layers) +
                            ") does not match the run config; set its keys in --config");
  }
  return m;
}

std::vector<std::uint32_t> load_tokens(const tint::RunConfig& cfg, const ModelInputs& in) {
  if (!in.tokens.empty()) {
    std::vector<std::uint32_t> t = tint::read_token_file(in.tokens);
    for (std::uint32_t id : t)
      if (id >= cfg.aux.vocab)
        throw tint::ConfigError("token id " + std::to_string(id) + " exceeds vocab");
    if (t.size() > cfg.aux.t_aux) throw tint::ConfigError("token file is longer than t_aux");
    return t;
  }
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(cfg.aux.vocab - 1));
  std::vector<std::uint32_t> t(cfg.resolved_length());
  for (auto& id : t) id = pick(rng);
  return t;
}

int cmd_build(const CommonOptions& o, const ModelInputs& in) {
  const tint::RunConfig cfg = resolve_config(o);
  const tint::TinTStack stack = tint::build_tint(load_model(cfg, in), cfg.tint);
  std::cout << "config: " << cfg.fingerprint() << "\n";
  std::cout << "entries=" << stack.entries.size() << " forward=" << stack.count(tint::StackOp::forward)
            << " backward=" << stack.count(tint::StackOp::backward)
            << " descent=" << stack.count(tint::StackOp::descent)
            << " charged_parameters=" << stack.charged_parameters() << "\n";
  std::cout << stack.dump();
  return kExitPass;
}

// ---- simulate / oracle -------------------------------------------------------------------

void write_outputs(const std::string& out_dir, const tint::RunConfig& cfg, const std::string& kind,
                   const tint::Tensor& logits, const tint::AuxModel* model, std::size_t T,
                   std::size_t r, double loss) {
  nlohmann::ordered_json meta;
  meta["kind"] = kind;
  meta["fingerprint"] = cfg.fingerprint();
  meta["tokens"] = T;
  meta["split"] = r;
  meta["eval_loss"] = loss;
  const std::filesystem::path dir(out_dir);
  tint::write_tensor_bundle(dir / "logits", {{"eval_logits", logits}}, meta.dump(), "tint-logits");
  if (model != nullptr) tint::write_checkpoint(dir / "checkpoint", *model);
  std::cout << kind << ": eval rows " << logits.rows() << ", eval loss " << std::setprecision(8)
            << loss << "; wrote " << (dir / "logits").string()
            << (model != nullptr ? " and " + (dir / "checkpoint").string() : "") << "\n";
}

int cmd_simulate(const CommonOptions& o, const ModelInputs& in, const std::string& out,
                 bool no_tint) {
  const tint::RunConfig cfg = resolve_config(o);
  const tint::AuxModel model = load_model(cfg, in);
  const std::vector<std::uint32_t> tokens = load_tokens(cfg, in);
  const std::size_t r = cfg.resolved_split(tokens.size());
  const tint::FormattedInput input = tint::format_input(tokens, r, cfg.tint.loss, cfg.tint.aux_mask);
  if (no_tint) {
    const tint::ModelTrace trace = tint::model_forward(model, tokens, input.mask);
    const tint::Tensor logits = tint::slice_rows(trace.logits, r, tokens.size());
    write_outputs(out, cfg, "plain-forward", logits, nullptr, tokens.size(), r,
                  tint::eval_loss(logits, tokens, r));
    return kExitPass;
  }
  const tint::SimulationResult sim = tint::run_simulation(tint::build_tint(model, cfg.tint), input);
  write_outputs(out, cfg, "simulate", sim.eval_logits, &sim.model, tokens.size(), r,
                tint::eval_loss(sim.eval_logits, tokens, r));
  return kExitPass;
}

int cmd_oracle(const CommonOptions& o, const ModelInputs& in, const std::string& out,
               const std::string& regime) {
  const tint::RunConfig cfg = resolve_config(o);
  const tint::AuxModel model = load_model(cfg, in);
  const std::vector<std::uint32_t> tokens = load_tokens(cfg, in);
  const std::size_t r = cfg.resolved_split(tokens.size());
  if (r < 1 || r >= tokens.size()) throw tint::ConfigError("split must satisfy 1 <= split < tokens");
  tint::FinetuneOptions opts = cfg.tint.finetune_options();
  opts.regime = tint::parse_regime(regime);
  const tint::FinetuneResult res = tint::finetune_eval(model, tokens, r, cfg.tint.loss, opts);
  write_outputs(out, cfg, "oracle-" + regime, res.eval_logits, &res.model, tokens.size(), r,
                tint::eval_loss(res.eval_logits, tokens, r));
  return kExitPass;
}

// ---- verify ------------------------------------------------------------------------------

int cmd_verify(const CommonOptions& o, std::vector<std::string> only, bool inject_fault,
               bool list, const std::string& report) {
  if (list) {
    for (const tint::CheckInfo& c : tint::check_catalog())
      std::cout << c.id << "\tcriterion " << c.criterion << "\t" << c.summary << "\n";
    return kExitPass;
  }
  const tint::RunConfig cfg = resolve_config(o);
  tint::VerifyOptions v;
  v.seed = cfg.seed;
  v.only = only.empty() ? cfg.checks : only;
  v.inject_fault = inject_fault;
  const std::vector<tint::CheckRecord> records = tint::run_checks(v);
  std::ofstream file;
  if (!report.empty()) {
    file.open(report);
    if (!file) throw tint::IoError("cannot write report " + report);
  }
  std::size_t failed = 0;
  for (const tint::CheckRecord& r : records) {
    const std::string line = tint::to_json_line(r);
    std::cout << line << "\n";
    if (file) file << line << "\n";
    if (!r.pass) ++failed;
  }
  std::cerr << records.size() - failed << "/" << records.size() << " checks passed\n";
  return failed == 0 ? kExitPass : kExitCheckFailed;
}

std::vector<std::string> split_commas(const std::vector<std::string>& items) {
  std::vector<std::string> out;
  for (const std::string& item : items) {
    std::stringstream ss(item);
    std::string part;
    while (std::getline(ss, part, ','))
      if (!part.empty()) out.push_back(part);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TinT simulator: count, build, simulate, verify and oracle runs"};
  app.require_subcommand(1);

  CommonOptions common;
  ModelInputs inputs;
  std::string out_dir = "tint_out";
  std::string regime = "simulated";
  std::string report;
  std::vector<std::string> only;
  bool no_tint = false, inject_fault = false, list = false;

  auto* count = app.add_subcommand("count", "Print the simulator parameter breakdown");
  add_common(count, common);

  auto* build = app.add_subcommand("build", "Construct the simulator stack and print its schedule");
  add_common(build, common);
  build->add_option("--checkpoint", inputs.checkpoint, "Auxiliary model checkpoint directory");

  auto* simulate = app.add_subcommand("simulate", "Run the simulator on a token sequence");
  add_common(simulate, common);
  simulate->add_option("--checkpoint", inputs.checkpoint, "Auxiliary model checkpoint directory");
  simulate->add_option("--tokens", inputs.tokens, "Whitespace-separated token ids");
  simulate->add_option("--out", out_dir, "Output directory for logits and the updated checkpoint");
  simulate->add_flag("--no-tint", no_tint, "Plain auxiliary forward pass without fine-tuning");

  auto* oracle = app.add_subcommand("oracle", "Run the reference fine-tuning loop");
  add_common(oracle, common);
  oracle->add_option("--checkpoint", inputs.checkpoint, "Auxiliary model checkpoint directory");
  oracle->add_option("--tokens", inputs.tokens, "Whitespace-separated token ids");
  oracle->add_option("--out", out_dir, "Output directory for logits and the updated checkpoint");
  oracle->add_option("--regime", regime, "Gradient regime")
      ->check(CLI::IsMember({"exact", "simulated"}));

  auto* verify = app.add_subcommand("verify", "Run the verification checks; exit 0 iff all pass");
  add_common(verify, common);
  verify->add_option("--only", only, "Check ids to run (repeatable or comma separated)");
  verify->add_flag("--inject-fault", inject_fault, "Perturb one encoded simulator weight");
  verify->add_flag("--list", list, "List check ids and exit");
  verify->add_option("--report", report, "Also write the records to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitPass : kExitConfig;
  }

  try {
    if (count->parsed()) return cmd_count(common);
    if (build->parsed()) return cmd_build(common, inputs);
    if (simulate->parsed()) return cmd_simulate(common, inputs, out_dir, no_tint);
    if (oracle->parsed()) return cmd_oracle(common, inputs, out_dir, regime);
    if (verify->parsed()) return cmd_verify(common, split_commas(only), inject_fault, list, report);
  } catch (const tint::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const tint::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}
