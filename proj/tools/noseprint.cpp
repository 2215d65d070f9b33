// Command-line front end: synth, augment, train, embed, fuse, pairs, verify, eval.
//
// Exit codes: 0 success, 1 runtime/I-O failure, 2 usage or configuration
// error, 3 numeric failure (non-finite loss or gradient).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "noseprint/noseprint.hpp"

namespace fs = std::filesystem;
using namespace noseprint;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("NOSEPRINT_SEED");
  if (!v || !*v) return std::nullopt;
  try {
    std::size_t used = 0;
    const unsigned long long s = std::stoull(v, &used);
    if (used != std::string(v).size()) throw std::invalid_argument(v);
    return s;
  } catch (const std::exception&) {
    throw ConfigError(std::string("NOSEPRINT_SEED is not an unsigned integer: '") + v + "'");
  }
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// Applies `--a.b.c value` pairs to an existing JSON document. Keys must
// already exist; values are parsed as JSON when possible, else taken as strings.
void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string key = extras[i];
    std::string value;
    if (key.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + key + "'");
    key = key.substr(2);
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("override --" + key + " needs a value");
      value = extras[++i];
    }
    nlohmann::json* node = &doc;
    std::stringstream ss(key);
    std::string part;
    while (std::getline(ss, part, '.')) {
      if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
      node = &(*node)[part];
    }
    nlohmann::json parsed;
    try {
      parsed = nlohmann::json::parse(value);
    } catch (const nlohmann::json::parse_error&) {
      parsed = value;
    }
    *node = parsed;
  }
}

void print_errors(const std::vector<std::pair<std::string, std::string>>& errors) {
  for (const auto& [id, msg] : errors) std::cerr << "warning: " << id << ": " << msg << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nose-print re-identification pipeline: synthetic data, augmentation, training, embedding, verification"};
  app.require_subcommand(1);

  // synth
  SynthOptions synth;
  std::optional<std::uint64_t> synth_seed;
  std::string synth_out;
  auto* cmd_synth = app.add_subcommand("synth", "Generate a synthetic identity dataset (PGM images + manifest.csv)");
  cmd_synth->add_option("--n-ids", synth.n_ids, "Number of identities (>= 2)")->capture_default_str();
  cmd_synth->add_option("--per-id", synth.per_id, "Images per identity (>= 2)")->capture_default_str();
  cmd_synth->add_option("--size", synth.size, "Image side length in pixels (>= 16)")->capture_default_str();
  cmd_synth->add_option("--seed", synth_seed, "Dataset seed (falls back to NOSEPRINT_SEED, then 0)");
  cmd_synth->add_option("--blur", synth.shift.blur_sigma, "Shift: Gaussian blur sigma")->capture_default_str();
  cmd_synth->add_option("--brightness", synth.shift.brightness, "Shift: additive brightness")->capture_default_str();
  cmd_synth->add_option("--noise", synth.shift.noise_std, "Shift: additive noise stddev")->capture_default_str();
  cmd_synth->add_option("--out", synth_out, "Output directory")->required();

  // augment
  std::string aug_plan, aug_manifest, aug_out;
  int aug_copies = 1;
  std::optional<std::uint64_t> aug_seed;
  auto* cmd_augment = app.add_subcommand("augment", "Offline augmentation: write originals plus augmented copies");
  cmd_augment->add_option("--plan", aug_plan, "AugPlan JSON file")->required();
  cmd_augment->add_option("--manifest", aug_manifest, "Input manifest CSV")->required();
  cmd_augment->add_option("--copies", aug_copies, "Augmented copies per image")->capture_default_str()->check(CLI::NonNegativeNumber);
  cmd_augment->add_option("--seed", aug_seed, "Override the plan seed");
  cmd_augment->add_option("--out", aug_out, "Output directory")->required();

  // train
  std::string train_manifest, train_out, train_config, train_log;
  auto* cmd_train = app.add_subcommand(
      "train", "Train with the joint CE + triplet + circle objective. Any config key can be overridden with "
               "--<dotted.key> <value>, e.g. --lr 0.001 --loss.w_tri 0 --model.pool max");
  cmd_train->add_option("--manifest", train_manifest, "Training manifest CSV")->required();
  cmd_train->add_option("--out", train_out, "Output checkpoint (.prck)")->required();
  cmd_train->add_option("--config", train_config, "TrainConfig JSON file");
  cmd_train->add_option("--log", train_log, "Training log CSV (default: <out>.log.csv)");
  cmd_train->allow_extras();

  // embed
  std::string embed_ckpt, embed_manifest, embed_out, embed_metric = "cosine";
  int embed_size = 224;
  auto* cmd_embed = app.add_subcommand("embed", "Extract embeddings for every manifest image");
  cmd_embed->add_option("--ckpt", embed_ckpt, "Checkpoint (.prck)")->required();
  cmd_embed->add_option("--manifest", embed_manifest, "Manifest CSV")->required();
  cmd_embed->add_option("--size", embed_size, "Network input size")->capture_default_str();
  cmd_embed->add_option("--metric", embed_metric, "cosine (unit vectors) or euclidean (raw)")
      ->check(CLI::IsMember({"cosine", "euclidean"}))
      ->capture_default_str();
  cmd_embed->add_option("--out", embed_out, "Output embeddings (.prem)")->required();

  // fuse
  std::vector<std::string> fuse_inputs;
  std::string fuse_out, fuse_mode = "concat";
  auto* cmd_fuse = app.add_subcommand("fuse", "Fuse embedding stores over the same ids");
  cmd_fuse->add_option("inputs", fuse_inputs, "Input .prem files")->required();
  cmd_fuse->add_option("--mode", fuse_mode, "concat or average")->check(CLI::IsMember({"concat", "average"}))->capture_default_str();
  cmd_fuse->add_option("--out", fuse_out, "Output embeddings (.prem)")->required();

  // pairs
  std::string pairs_manifest, pairs_out;
  auto* cmd_pairs = app.add_subcommand("pairs", "Write every image pair of a manifest as a verification pairs CSV");
  cmd_pairs->add_option("--manifest", pairs_manifest, "Manifest CSV")->required();
  cmd_pairs->add_option("--out", pairs_out, "Output pairs CSV")->required();

  // verify
  std::string verify_emb, verify_pairs, verify_out, verify_metric = "cosine";
  int verify_qe_m = -1;
  auto* cmd_verify = app.add_subcommand("verify", "Score verification pairs (score = -distance)");
  cmd_verify->add_option("--embeddings", verify_emb, "Embeddings (.prem)")->required();
  cmd_verify->add_option("--pairs", verify_pairs, "Pairs CSV (a,b,label)")->required();
  cmd_verify->add_option("--metric", verify_metric, "cosine or euclidean")
      ->check(CLI::IsMember({"cosine", "euclidean"}))
      ->capture_default_str();
  cmd_verify->add_option("--qe-m", verify_qe_m, "Query expansion neighbor count (omit to disable)")->check(CLI::NonNegativeNumber);
  cmd_verify->add_option("--out", verify_out, "Output scores CSV (a,b,label,score)")->required();

  // eval
  std::string eval_scores, eval_out;
  auto* cmd_eval = app.add_subcommand("eval", "ROC curve and AUC of a scores CSV; prints auc,<value>");
  cmd_eval->add_option("--scores", eval_scores, "Scores CSV")->required();
  cmd_eval->add_option("--out", eval_out, "ROC points CSV (default: <scores>.roc.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*cmd_synth) {
      synth.seed = synth_seed ? *synth_seed : env_seed().value_or(0);
      const Manifest m = generate_dataset(synth, synth_out);
      std::cout << "wrote " << m.rows.size() << " images to " << synth_out << "\n";
    } else if (*cmd_augment) {
      nlohmann::json pj = read_json_file(aug_plan);
      AugPlan plan = plan_from_json(pj);
      if (aug_seed) {
        plan.seed = *aug_seed;
      } else if (!pj.contains("seed")) {
        plan.seed = env_seed().value_or(0);
      }
      const Manifest out = apply_plan(read_manifest(aug_manifest), plan, aug_copies, aug_out);
      std::size_t failed = 0;
      for (const auto& r : out.rows) failed += r.error.empty() ? 0 : 1;
      std::cout << "wrote " << out.rows.size() - failed << " images to " << aug_out;
      if (failed) std::cout << " (" << failed << " inputs failed; see manifest error column)";
      std::cout << "\n";
    } else if (*cmd_train) {
      nlohmann::json cj = to_json(TrainConfig{});
      bool seed_given = false;
      if (!train_config.empty()) {
        const nlohmann::json file = read_json_file(train_config);
        train_config_from_json(file);  // rejects unknown keys with the file's own paths
        seed_given = file.contains("seed");
        cj.merge_patch(file);
      }
      const auto extras = cmd_train->remaining();
      for (const auto& e : extras) seed_given = seed_given || e == "--seed" || e.rfind("--seed=", 0) == 0;
      apply_overrides(cj, extras);
      TrainConfig cfg = train_config_from_json(cj);
      if (!seed_given) cfg.seed = env_seed().value_or(cfg.seed);
      TrainOptions opts;
      opts.log_path = train_log.empty() ? fs::path(train_out + ".log.csv") : fs::path(train_log);
      auto result = train(cfg, read_manifest(train_manifest), opts);
      save_checkpoint(checkpoint_of(result.network), train_out);
      const int last = cfg.epochs;
      std::cout << "epoch 1 mean loss " << result.log.epoch_mean(1) << ", epoch " << last << " mean loss "
                << result.log.epoch_mean(last) << "\n";
    } else if (*cmd_embed) {
      const auto res = extract_embeddings(load_checkpoint(embed_ckpt), read_manifest(embed_manifest), embed_size, parse_metric(embed_metric));
      print_errors(res.errors);
      save_embeddings(res.store, embed_out);
      std::cout << "wrote " << res.store.size() << " embeddings (dim " << res.store.dim() << ") to " << embed_out << "\n";
    } else if (*cmd_fuse) {
      std::vector<EmbeddingStore> stores;
      for (const auto& p : fuse_inputs) stores.push_back(load_embeddings(p));
      std::vector<const EmbeddingStore*> ptrs;
      for (const auto& s : stores) ptrs.push_back(&s);
      const auto fused = fuse_embeddings(ptrs, fuse_mode == "average" ? FuseMode::average : FuseMode::concat);
      save_embeddings(fused, fuse_out);
      std::cout << "wrote " << fused.size() << " fused embeddings (dim " << fused.dim() << ") to " << fuse_out << "\n";
    } else if (*cmd_pairs) {
      const auto pairs = all_pairs(read_manifest(pairs_manifest));
      write_pairs(pairs, pairs_out);
      std::cout << "wrote " << pairs.size() << " pairs to " << pairs_out << "\n";
    } else if (*cmd_verify) {
      const Metric metric = parse_metric(verify_metric);
      std::optional<QEConfig> qe;
      if (verify_qe_m >= 0) qe = QEConfig{verify_qe_m, metric, std::nullopt};
      const auto scores = score_pairs(read_pairs(verify_pairs), load_embeddings(verify_emb), metric, qe);
      write_scores(scores, verify_out);
      std::cout << "scored " << scores.size() << " pairs\n";
    } else if (*cmd_eval) {
      const RocCurve curve = evaluate(read_scores(eval_scores));
      write_roc(curve, eval_out.empty() ? fs::path(eval_scores + ".roc.csv") : fs::path(eval_out));
      std::cout << "auc," << format_double(curve.auc) << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
