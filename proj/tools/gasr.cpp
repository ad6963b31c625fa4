// gasr: command-line entry point.
//
//   gasr gen-data --seed S --count N --domain clean|ood --out corpus.tsv
//   gasr sft      [--config F] --train T --dev D --out DIR
//   gasr grpo     [--config F] --init CKPT --train T --dev D --out DIR [--algo ..] [--reward ..]
//   gasr eval     --ckpt CKPT --corpus C [--decode greedy|beam|sample] [--out report.json]
//   gasr score    --ref REF --hyp HYP [--out report.json]
//   gasr compare  --a A.json --b B.json [--out delta.json]
//
// Exit codes: 0 ok, 2 usage, 3 data, 4 runtime. Failures print one JSON line on stderr.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include "gasr/align.hpp"
#include "gasr/checkpoint.hpp"
#include "gasr/data.hpp"
#include "gasr/eval.hpp"
#include "gasr/train.hpp"

namespace fs = std::filesystem;
using namespace gasr;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kData = 3, kRuntime = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

[[noreturn]] void usage(const std::string& message) { throw UsageError(message); }

int fail(ExitCode code, const std::string& kind, const std::string& message) {
  nlohmann::json j{{"error", kind}, {"code", static_cast<int>(code)}, {"message", message}};
  std::cerr << j.dump() << std::endl;
  return code;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const std::string& path, const std::string& text) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  out << text;
  out.flush();
  if (!out) throw std::runtime_error("cannot write " + path);
}

// Accepts either the checkpoint stem or the path of its manifest/blob.
std::string checkpoint_stem(std::string path) {
  for (const std::string ext : {".manifest", ".bin"}) {
    if (path.size() > ext.size() && path.compare(path.size() - ext.size(), ext.size(), ext) == 0) {
      return path.substr(0, path.size() - ext.size());
    }
  }
  return path;
}

void persist_config(CLI::App* cmd, const std::string& path) { write_file(path, cmd->config_to_str(true, true)); }

int default_workers() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
  std::uint64_t seed = 1;
  int count = 1000;
  std::string domain = "clean";
  std::string out;
  int frame_dim = 16;
  int vocab_size = 64;
  std::uint64_t language_seed = Language::kDefaultSeed;
  std::optional<double> noise, p_spurious, p_drop;
  std::optional<int> min_frames, max_frames;
};

void add_gen_data(CLI::App& app, GenDataArgs& a, std::function<void()>& run) {
  auto* cmd = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  cmd->add_option("--seed", a.seed, "Corpus seed")->capture_default_str();
  cmd->add_option("--count", a.count, "Number of utterances")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--domain", a.domain, "clean | ood")->capture_default_str()->check(CLI::IsMember({"clean", "ood"}));
  cmd->add_option("--out", a.out, "Output corpus file")->required();
  cmd->add_option("--frame-dim", a.frame_dim, "Frame dimension")->capture_default_str();
  cmd->add_option("--vocab-size", a.vocab_size, "Vocabulary size")->capture_default_str();
  cmd->add_option("--language-seed", a.language_seed, "Seed of the shared word prototypes and bigram")
      ->capture_default_str();
  cmd->add_option("--noise", a.noise, "Override the domain's frame noise sigma");
  cmd->add_option("--p-spurious", a.p_spurious, "Override the spurious-frame probability");
  cmd->add_option("--p-drop", a.p_drop, "Override the frame-drop probability");
  cmd->add_option("--min-frames", a.min_frames, "Override the minimum frames per token");
  cmd->add_option("--max-frames", a.max_frames, "Override the maximum frames per token");
  run = [&a, cmd] {
    DomainSpec spec = DomainSpec::for_domain(parse_domain(a.domain));
    if (a.noise) spec.noise = *a.noise;
    if (a.p_spurious) spec.p_spurious = *a.p_spurious;
    if (a.p_drop) spec.p_drop = *a.p_drop;
    if (a.min_frames) spec.min_frames_per_token = *a.min_frames;
    if (a.max_frames) spec.max_frames_per_token = *a.max_frames;
    try {
      spec.validate();
    } catch (const ContractError& e) {
      usage(e.what());
    }
    Vocab vocab{a.vocab_size};
    const Language language(vocab, a.frame_dim, a.language_seed);
    const Corpus corpus = generate_corpus(a.seed, a.count, spec, language);
    write_corpus(a.out, corpus);
    persist_config(cmd, a.out + ".config");
    std::cout << "wrote " << corpus.size() << " utterances to " << a.out << "\n";
  };
}

// ---------------------------------------------------------------- sft / grpo

struct TrainArgs {
  std::string train, dev, out;
  std::optional<std::string> init;
  bool resume = false;
  std::optional<int> stop_after;
  bool quiet = false;
  TrainConfig config;
  std::string lr_schedule;
  std::string eval_decode = "greedy";
  // grpo only
  std::string algo = "grpo";
  std::string reward = "wer";
  std::optional<double> beta, eps_low, eps_high;
  std::optional<std::string> loss_norm, degenerate;
  std::optional<bool> normalize_std;
  std::string decode = "sample";
};

CLI::App* add_train_common(CLI::App& app, const std::string& name, const std::string& help, TrainArgs& a) {
  a.config.workers = default_workers();
  auto* cmd = app.add_subcommand(name, help);
  cmd->add_option("--train", a.train, "Training corpus")->required()->check(CLI::ExistingFile);
  cmd->add_option("--dev", a.dev, "Dev corpus for checkpoint selection")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", a.out, "Output directory")->required();
  cmd->add_flag("--resume", a.resume, "Continue from <out>/last when present");
  cmd->add_option("--stop-after", a.stop_after, "Interrupt after this step (resumable)");
  cmd->add_flag("--quiet", a.quiet, "No progress lines");
  auto& c = a.config;
  cmd->add_option("--seed", c.seed, "Run seed")->capture_default_str();
  cmd->add_option("--max-steps", c.max_steps, "Training steps")->capture_default_str();
  cmd->add_option("--batch-size", c.batch_size, "Utterances (prompts) per step")->capture_default_str();
  cmd->add_option("--eval-every", c.eval_every, "Dev evaluation period in steps")->capture_default_str();
  cmd->add_option("--lr", c.schedule.peak, "Peak (cosine) or fixed (constant) learning rate")->capture_default_str();
  cmd->add_option("--lr-schedule", a.lr_schedule, "constant | cosine")->capture_default_str()
      ->check(CLI::IsMember({"constant", "cosine"}));
  cmd->add_option("--warmup-steps", c.schedule.warmup_steps, "Cosine warmup steps")->capture_default_str();
  cmd->add_option("--clip-norm", c.adam.clip_norm, "Global gradient-norm clip (<= 0 disables)")->capture_default_str();
  cmd->add_option("--eval-decode", a.eval_decode, "greedy | beam")->capture_default_str()
      ->check(CLI::IsMember({"greedy", "beam"}));
  cmd->add_option("--eval-beam-size", c.eval_decode.beam_size, "Beam size for beam dev decoding")->capture_default_str();
  cmd->add_option("--eval-max-len", c.eval_decode.max_len, "Max dev decode length")->capture_default_str();
  cmd->add_option("--workers", c.workers, "Worker threads (results do not depend on this)")->capture_default_str();
  return cmd;
}

void finish_train_config(TrainArgs& a) {
  auto& c = a.config;
  c.schedule.kind = a.lr_schedule == "cosine" ? LrSchedule::Kind::kCosine : LrSchedule::Kind::kConstant;
  c.schedule.total_steps = c.max_steps;
  c.eval_decode.mode = parse_decode_mode(a.eval_decode);
}

RunOptions run_options(const TrainArgs& a) {
  RunOptions o;
  o.out_dir = a.out;
  o.init_checkpoint = a.init ? std::optional<std::string>(checkpoint_stem(*a.init)) : std::nullopt;
  o.resume = a.resume;
  o.stop_after = a.stop_after;
  if (!a.quiet) o.log = [](const std::string& line) { std::cerr << line << std::endl; };
  return o;
}

void write_run_summary(const RunResult& r) {
  nlohmann::ordered_json j{{"last_step", r.last_step}, {"best_step", r.best_step}, {"best_dev_wer", r.best_dev_wer}};
  std::cout << j.dump() << "\n";
}

void add_sft(CLI::App& app, TrainArgs& a, std::function<void()>& run) {
  a.config = TrainConfig::sft_defaults();
  a.lr_schedule = "cosine";
  auto* cmd = add_train_common(app, "sft", "Supervised fine-tuning", a);
  auto& m = a.config.model;
  cmd->add_option("--init", a.init, "Warm-start checkpoint");
  cmd->add_option("--hidden", m.hidden, "Model width")->capture_default_str();
  cmd->add_option("--layers", m.layers, "Transformer blocks")->capture_default_str();
  cmd->add_option("--heads", m.heads, "Attention heads")->capture_default_str();
  cmd->add_option("--ffn", m.ffn, "Feed-forward width")->capture_default_str();
  cmd->add_option("--max-positions", m.max_positions, "Position table size")->capture_default_str();
  run = [&a, cmd] {
    finish_train_config(a);
    const Corpus train = read_corpus(a.train);
    const Corpus dev = read_corpus(a.dev);
    a.config.model.vocab_size = train.vocab_size;
    a.config.model.frame_dim = train.frame_dim;
    try {
      a.config.validate();
    } catch (const ContractError& e) {
      usage(e.what());
    }
    fs::create_directories(a.out);
    persist_config(cmd, (fs::path(a.out) / "resolved_config.ini").string());
    write_run_summary(run_training(a.config, train, dev, run_options(a)));
  };
}

void add_grpo(CLI::App& app, TrainArgs& a, std::function<void()>& run) {
  a.config = TrainConfig::grpo_defaults();
  a.lr_schedule = "constant";
  auto* cmd = add_train_common(app, "grpo", "Group-relative policy optimization from an SFT checkpoint", a);
  auto& c = a.config;
  cmd->add_option("--init", a.init, "SFT checkpoint (also the frozen reference)")->required();
  cmd->add_option("--algo", a.algo, "grpo | dapo | drgrpo")->capture_default_str()
      ->check(CLI::IsMember({"grpo", "dapo", "drgrpo"}));
  cmd->add_option("--reward", a.reward, "wer | em | ed")->capture_default_str()->check(CLI::IsMember({"wer", "em", "ed"}));
  cmd->add_option("--reward-scale", c.reward.scale, "Multiplicative reward scale")->capture_default_str();
  cmd->add_option("--beta", a.beta, "KL penalty weight (preset default when omitted)");
  cmd->add_option("--eps-low", a.eps_low, "Lower clip range (preset default when omitted)");
  cmd->add_option("--eps-high", a.eps_high, "Upper clip range (preset default when omitted)");
  cmd->add_option("--loss-norm", a.loss_norm, "per_sample | per_token_batch | unnormalized_sum");
  cmd->add_option("--degenerate", a.degenerate, "zero_advantage | skip_group");
  cmd->add_option("--normalize-std", a.normalize_std, "Divide advantages by the group std (true|false)");
  cmd->add_option("--num-generations", c.rl.group_size, "Group size G")->capture_default_str();
  cmd->add_option("--decode", a.decode, "Rollout generation: sample | beam")->capture_default_str()
      ->check(CLI::IsMember({"sample", "beam"}));
  cmd->add_option("--temperature", c.rollout.temperature, "Sampling temperature")->capture_default_str();
  cmd->add_option("--max-len", c.rollout.max_len, "Max rollout length (tokens incl. <EOS>)")->capture_default_str();
  cmd->add_option("--policy-updates", c.policy_updates, "Updates per rollout batch")->capture_default_str();
  run = [&a, cmd] {
    finish_train_config(a);
    auto& c = a.config;
    const int group_size = c.rl.group_size;
    c.rl = RLConfig::preset(parse_algorithm(a.algo));
    c.rl.group_size = group_size;
    if (c.rl.algorithm == Algorithm::kDapo && a.beta && *a.beta != 0.0) {
      usage("--algo dapo removes the KL term; --beta must be 0 (got " + std::to_string(*a.beta) + ")");
    }
    if (a.beta) c.rl.beta = *a.beta;
    if (a.eps_low) c.rl.eps_low = *a.eps_low;
    if (a.eps_high) c.rl.eps_high = *a.eps_high;
    if (a.normalize_std) c.rl.normalize_by_std = *a.normalize_std;
    try {
      if (a.loss_norm) c.rl.loss_normalization = parse_loss_normalization(*a.loss_norm);
      if (a.degenerate) c.rl.degenerate_policy = parse_degenerate_policy(*a.degenerate);
      c.reward.kind = parse_reward_kind(a.reward);
      c.rollout.mode = parse_decode_mode(a.decode);
      c.rollout.beam_size = c.rl.group_size;
      c.rl.max_generation_length = c.rollout.max_len;
      c.validate();
    } catch (const ContractError& e) {
      usage(e.what());
    }
    const Corpus train = read_corpus(a.train);
    const Corpus dev = read_corpus(a.dev);
    fs::create_directories(a.out);
    persist_config(cmd, (fs::path(a.out) / "resolved_config.ini").string());
    write_run_summary(run_training(c, train, dev, run_options(a)));
  };
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string ckpt, corpus;
  std::optional<std::string> out;
  std::string decode = "greedy";
  DecodeSettings settings;
  int workers = default_workers();
  std::size_t worst = 10;
};

void add_eval(CLI::App& app, EvalArgs& a, std::function<void()>& run) {
  auto* cmd = app.add_subcommand("eval", "Decode a corpus and report WER with its breakdown");
  cmd->add_option("--ckpt", a.ckpt, "Checkpoint stem or manifest path")->required();
  cmd->add_option("--corpus", a.corpus, "Corpus file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--decode", a.decode, "greedy | beam | sample")->capture_default_str()
      ->check(CLI::IsMember({"greedy", "beam", "sample"}));
  cmd->add_option("--beam-size", a.settings.beam_size, "Beam size")->capture_default_str();
  cmd->add_option("--max-len", a.settings.max_len, "Max decode length")->capture_default_str();
  cmd->add_option("--temperature", a.settings.temperature, "Sampling temperature")->capture_default_str();
  cmd->add_option("--worst", a.worst, "Worst offenders listed")->capture_default_str();
  cmd->add_option("--workers", a.workers, "Worker threads")->capture_default_str();
  cmd->add_option("--out", a.out, "Report JSON path (text goes to stdout)");
  run = [&a, cmd] {
    a.settings.mode = parse_decode_mode(a.decode);
    const Checkpoint ck = load_checkpoint(checkpoint_stem(a.ckpt));
    const PolicyModel<float> model = model_from_checkpoint<float>(ck);
    const Corpus corpus = read_corpus(a.corpus);
    if (corpus.vocab_size != model.config().vocab_size || corpus.frame_dim != model.config().frame_dim) {
      throw ParseError(a.corpus + ": vocab/frame_dim does not match the checkpoint");
    }
    const EvalReport report = evaluate(model, corpus, a.settings, a.workers, a.worst);
    std::cout << report.to_text();
    if (a.out) {
      write_file(*a.out, report.to_json() + "\n");
      persist_config(cmd, *a.out + ".config");
    }
  };
}

// ---------------------------------------------------------------- score

struct ScoreArgs {
  std::string ref, hyp;
  std::optional<std::string> out;
};

std::vector<std::vector<std::string>> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::vector<std::string>> lines;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream words(line);
    std::vector<std::string> w;
    std::string word;
    while (words >> word) w.push_back(word);
    lines.push_back(std::move(w));
  }
  return lines;
}

void add_score(CLI::App& app, ScoreArgs& a, std::function<void()>& run) {
  auto* cmd = app.add_subcommand("score", "Standalone WER between line-aligned reference and hypothesis files");
  cmd->add_option("--ref", a.ref, "Reference transcripts, one per line")->required()->check(CLI::ExistingFile);
  cmd->add_option("--hyp", a.hyp, "Hypotheses, one per line")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", a.out, "Alignment report JSON");
  run = [&a, cmd] {
    const auto refs = read_lines(a.ref);
    const auto hyps = read_lines(a.hyp);
    if (refs.size() != hyps.size()) {
      throw ParseError("line count mismatch: " + std::to_string(refs.size()) + " references vs " +
                       std::to_string(hyps.size()) + " hypotheses");
    }
    std::map<std::string, int> ids;
    auto encode = [&](const std::vector<std::string>& words) {
      std::vector<int> out;
      for (const auto& w : words) out.push_back(ids.emplace(w, static_cast<int>(ids.size())).first->second);
      return out;
    };
    ErrorSummary total;
    nlohmann::ordered_json lines = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const AlignmentStats s = align(encode(refs[i]), encode(hyps[i]));
      total.add(s);
      lines.push_back({{"line", i + 1},
                       {"ref_tokens", s.ref_len},
                       {"substitutions", s.substitutions},
                       {"deletions", s.deletions},
                       {"insertions", s.insertions}});
    }
    std::printf("WER %.2f%% (ins %.2f%%, del %.2f%%, sub %.2f%%) over %ld reference words in %ld lines\n",
                total.wer(), total.ins_rate(), total.del_rate(), total.sub_rate(), total.ref_tokens,
                total.utterances);
    if (a.out) {
      nlohmann::ordered_json j{{"wer", total.wer()},
                               {"ins_rate", total.ins_rate()},
                               {"del_rate", total.del_rate()},
                               {"sub_rate", total.sub_rate()},
                               {"ref_tokens", total.ref_tokens},
                               {"substitutions", total.substitutions},
                               {"deletions", total.deletions},
                               {"insertions", total.insertions},
                               {"lines", lines}};
      write_file(*a.out, j.dump() + "\n");
      persist_config(cmd, *a.out + ".config");
    }
  };
}

// ---------------------------------------------------------------- compare

struct CompareArgs {
  std::string a, b;
  std::optional<std::string> out;
};

void add_compare(CLI::App& app, CompareArgs& a, std::function<void()>& run) {
  auto* cmd = app.add_subcommand("compare", "Field-wise deltas between two eval reports (b - a)");
  cmd->add_option("--a", a.a, "Baseline report JSON")->required()->check(CLI::ExistingFile);
  cmd->add_option("--b", a.b, "Candidate report JSON")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", a.out, "Delta report JSON");
  run = [&a, cmd] {
    const EvalReport ra = EvalReport::from_json(read_file(a.a));
    const EvalReport rb = EvalReport::from_json(read_file(a.b));
    const CompareReport delta = compare(ra, rb);
    std::cout << delta.to_text();
    if (a.out) {
      write_file(*a.out, delta.to_json() + "\n");
      persist_config(cmd, *a.out + ".config");
    }
  };
}

// Config files hold `key = value` lines (`#` comments, optional quotes, empty
// values mean unset). Their entries become `--key=value` arguments placed
// before the real ones, so explicit flags take precedence.
std::vector<std::string> expand_config(CLI::App& app, int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::optional<std::string> path;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) usage("--config requires a file");
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (!path) return {args.rbegin(), args.rend()};
  if (rest.empty()) usage("--config given without a subcommand");
  CLI::App* sub = nullptr;
  try {
    sub = app.get_subcommand(rest.front());
  } catch (const CLI::OptionNotFound&) {
    usage("unknown subcommand '" + rest.front() + "'");
  }
  std::ifstream in(*path);
  if (!in) usage("cannot open config file " + *path);
  std::vector<std::string> expanded{rest.front()};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#' || line[first] == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) usage(*path + ":" + std::to_string(line_no) + ": expected key = value");
    std::string key = CLI::detail::trim_copy(line.substr(0, eq));
    std::string value = CLI::detail::trim_copy(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (key == "config") continue;
    const CLI::Option* opt = nullptr;
    try {
      opt = sub->get_option("--" + key);
    } catch (const CLI::OptionNotFound&) {
      usage(*path + ":" + std::to_string(line_no) + ": unknown key '" + key + "' for " + sub->get_name());
    }
    if (value.empty()) continue;
    if (opt->get_type_size() == 0) {
      if (value == "true") expanded.push_back("--" + key);
      continue;
    }
    expanded.push_back("--" + key + "=" + value);
  }
  expanded.insert(expanded.end(), rest.begin() + 1, rest.end());
  return {expanded.rbegin(), expanded.rend()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Group-relative policy optimization for a synthetic speech-to-text task"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  std::map<std::string, std::function<void()>> runners;
  GenDataArgs gen;
  TrainArgs sft, grpo;
  EvalArgs eval;
  ScoreArgs score;
  CompareArgs cmp;
  add_gen_data(app, gen, runners["gen-data"]);
  add_sft(app, sft, runners["sft"]);
  add_grpo(app, grpo, runners["grpo"]);
  add_eval(app, eval, runners["eval"]);
  add_score(app, score, runners["score"]);
  add_compare(app, cmp, runners["compare"]);
  std::string config_path;
  for (auto* sub : app.get_subcommands({})) {
    sub->add_option("--config", config_path, "key = value file supplying any flag; command-line flags win");
  }

  try {
    std::vector<std::string> args = expand_config(app, argc, argv);  // reversed, as CLI11 expects
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kUsage, "usage", e.what());
  } catch (const UsageError& e) {
    return fail(kUsage, "usage", e.what());
  } catch (const std::exception& e) {
    return fail(kUsage, "usage", e.what());
  }

  try {
    for (auto* sub : app.get_subcommands()) runners.at(sub->get_name())();
  } catch (const UsageError& e) {
    return fail(kUsage, "usage", e.what());
  } catch (const ParseError& e) {
    return fail(kData, "data", e.what());
  } catch (const std::exception& e) {
    return fail(kRuntime, "runtime", e.what());
  }
  return kOk;
}
