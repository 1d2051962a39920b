#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "protestlens/checkpoint.hpp"
#include "protestlens/corpus.hpp"
#include "protestlens/image_io.hpp"
#include "protestlens/text_model.hpp"
#include "protestlens/trainer.hpp"
#include "protestlens/vision_model.hpp"
#include "protestlens/vocab.hpp"

namespace fs = std::filesystem;
using namespace protestlens;

namespace {

constexpr const char* kToolVersion = "0.1.0";

struct UsageFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint32_t default_seed() {
  const char* env = std::getenv("PROTESTLENS_SEED");
  if (env == nullptr || *env == '\0') return 7;
  char* end = nullptr;
  const unsigned long v = std::strtoul(env, &end, 10);
  if (*end != '\0' || v > 0xFFFFFFFFul) {
    throw UsageFailure("PROTESTLENS_SEED must be an unsigned 32-bit integer, got '" +
                       std::string(env) + "'");
  }
  return static_cast<std::uint32_t>(v);
}

nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open config file: " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("malformed JSON in " + path + ": " + e.what());
  }
}

void write_text_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write file: " + path.string());
  out << content;
}

void write_manifest(const fs::path& path, const nlohmann::json& manifest) {
  write_text_file(path, manifest.dump(2) + "\n");
}

bool quiet = false;

void note(const std::string& line) {
  if (!quiet) std::cout << line << "\n";
}

// ---------------------------------------------------------------------------
// Shared option bundles

struct TrainFlags {
  TrainConfig config;
  std::vector<float> class_weights;

  void attach(CLI::App* cmd, bool with_class_weights) {
    cmd->add_option("--epochs", config.epochs, "Passes over the train split")
        ->capture_default_str();
    cmd->add_option("--batch-size", config.batch_size, "Examples per step")
        ->capture_default_str();
    cmd->add_option("--lr", config.lr, "Peak learning rate")->capture_default_str();
    cmd->add_option("--schedule", config.schedule,
                    "Learning-rate schedule: constant or warmup_linear")
        ->check(CLI::IsMember({"constant", "warmup_linear"}))
        ->capture_default_str();
    cmd->add_option("--patience", config.patience,
                    "Evals without val-accuracy improvement before stopping")
        ->capture_default_str();
    cmd->add_option("--eval-every", config.eval_every, "Steps between validations")
        ->capture_default_str();
    cmd->add_option("--weight-decay", config.weight_decay, "Decoupled weight decay")
        ->capture_default_str();
    cmd->add_option("--threshold", config.threshold, "Decision threshold")
        ->capture_default_str();
    if (with_class_weights) {
      cmd->add_option("--class-weights", class_weights,
                      "Loss weights for classes 0 and 1")
          ->expected(2);
    }
  }

  TrainConfig resolved(std::uint32_t seed) const {
    TrainConfig tc = config;
    tc.seed = seed;
    tc.class_weights = class_weights;
    return tc;
  }
};

nlohmann::json train_settings_json(const TrainConfig& tc) {
  nlohmann::json j{{"epochs", tc.epochs},
                   {"batch_size", tc.batch_size},
                   {"lr", tc.lr},
                   {"schedule", tc.schedule},
                   {"seed", tc.seed},
                   {"patience", tc.patience},
                   {"eval_every", tc.eval_every},
                   {"weight_decay", tc.weight_decay},
                   {"threshold", tc.threshold}};
  if (!tc.class_weights.empty()) j["class_weights"] = tc.class_weights;
  return j;
}

nlohmann::json report_json(const EvalReport& rep, const TrainResult& result) {
  nlohmann::json j = rep;
  j["best_step"] = result.best_step;
  j["steps_run"] = result.steps_run;
  j["early_stopped"] = result.early_stopped;
  return j;
}

// ---------------------------------------------------------------------------
// Dataset plumbing

TextDataset load_text_split(const std::string& path, const Vocabulary& vocab,
                            const TextModelConfig& config) {
  return encode_corpus(load_corpus_jsonl(path), vocab, config);
}

void check_vocab_size(const Vocabulary& vocab, const TextModelConfig& config) {
  if (vocab.size() != config.vocab_size) {
    throw DataError("vocabulary has " + std::to_string(vocab.size()) +
                    " entries but the model expects " +
                    std::to_string(config.vocab_size));
  }
}

/// Image paths in a label manifest resolve relative to the manifest itself.
VisionDataset load_vision_split(const std::string& csv_path,
                                const VisionModelConfig& config) {
  const std::vector<ImageLabelRow> rows = load_image_manifest(csv_path);
  const fs::path base = fs::path(csv_path).parent_path();
  std::vector<std::size_t> column(config.attribute_heads.size());
  if (!rows.empty()) {
    for (std::size_t a = 0; a < config.attribute_heads.size(); ++a) {
      const auto& name = config.attribute_heads[a];
      auto it = std::find(rows[0].names.begin(), rows[0].names.end(), name);
      if (it == rows[0].names.end()) {
        throw DataError("image manifest " + csv_path + " lacks column '" + name + "'");
      }
      column[a] = static_cast<std::size_t>(it - rows[0].names.begin());
    }
  }
  VisionDataset ds;
  for (const ImageLabelRow& row : rows) {
    fs::path p(row.path);
    if (p.is_relative()) p = base / p;
    ds.images.push_back(load_image(p.string(), config.image_size));
    std::vector<float> labels(config.attribute_heads.size());
    std::vector<float> mask(config.attribute_heads.size());
    for (std::size_t a = 0; a < config.attribute_heads.size(); ++a) {
      labels[a] = row.values[column[a]];
      mask[a] = row.present[column[a]];
    }
    ds.labels.push_back(std::move(labels));
    ds.masks.push_back(std::move(mask));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Subcommands

struct BuildCorpusArgs {
  CorpusBuildConfig config;
  std::uint32_t seed = 7;
};

void run_build_corpus(BuildCorpusArgs& args) {
  args.config.seed = args.seed;
  CorpusBuildResult result = build_corpus(args.config);
  fs::create_directories(args.config.out_dir);
  write_corpus(result, args.config.out_dir);
  const auto& counts = result.manifest["counts"];
  note("corpus: " + counts["positives"].dump() + " positives, " +
       counts["negatives_sampled"].dump() + " negatives -> " + args.config.out_dir);
}

struct BuildVocabArgs {
  std::string corpus_path;
  std::string out_path;
  std::size_t size = 30000;
};

void run_build_vocab(const BuildVocabArgs& args) {
  std::vector<LabeledExample> examples = load_corpus_jsonl(args.corpus_path);
  std::vector<std::string> texts;
  texts.reserve(examples.size());
  for (const LabeledExample& ex : examples) texts.push_back(ex.text);
  Vocabulary vocab = build_vocabulary(texts, args.size);
  if (fs::path(args.out_path).has_parent_path()) {
    fs::create_directories(fs::path(args.out_path).parent_path());
  }
  vocab.save(args.out_path);
  write_manifest(args.out_path + ".manifest.json",
                 {{"tool", "protestlens"},
                  {"tool_version", kToolVersion},
                  {"subcommand", "build-vocab"},
                  {"inputs", {{"corpus", args.corpus_path}}},
                  {"outputs", {{"vocabulary", args.out_path}}},
                  {"settings", {{"size_requested", args.size}, {"size_actual", vocab.size()}}}});
  note("vocabulary: " + std::to_string(vocab.size()) + " tokens -> " + args.out_path);
}

struct TrainTextArgs {
  std::string corpus_dir;
  std::string vocab_path;
  std::string model_config_path;
  std::string out_dir;
  TrainFlags flags;
  std::uint32_t seed = 7;
};

void run_train_text(const TrainTextArgs& args) {
  const TrainConfig tc = args.flags.resolved(args.seed);
  Vocabulary vocab = Vocabulary::load(args.vocab_path);
  TextModelConfig mc = load_json_file(args.model_config_path).get<TextModelConfig>();
  mc.vocab_size = vocab.size();
  mc.validate();

  const fs::path dir(args.corpus_dir);
  TextDataset train = load_text_split((dir / "corpus.train.jsonl").string(), vocab, mc);
  TextDataset val = load_text_split((dir / "corpus.val.jsonl").string(), vocab, mc);

  TextModel<float> model = TextModel<float>::init(mc, tc.seed);
  TrainResult result = train_text_model(model, train, val, tc);

  fs::create_directories(args.out_dir);
  const fs::path out(args.out_dir);
  write_history_csv((out / "history.csv").string(), result.history);
  const nlohmann::json report = report_json(result.best_val, result);
  write_text_file(out / "report.json", report.dump(2) + "\n");
  save_text_model((out / "model.plck").string(), model, {{"val", result.best_val}});
  write_manifest(out / "run-manifest.json",
                 {{"tool", "protestlens"},
                  {"tool_version", kToolVersion},
                  {"subcommand", "train-text"},
                  {"inputs",
                   {{"corpus_dir", args.corpus_dir},
                    {"vocabulary", args.vocab_path},
                    {"model_config", args.model_config_path}}},
                  {"outputs",
                   {{"checkpoint", (out / "model.plck").string()},
                    {"history", (out / "history.csv").string()},
                    {"report", (out / "report.json").string()}}},
                  {"model_config", mc},
                  {"train", train_settings_json(tc)}});
  std::ostringstream msg;
  msg << "best val accuracy " << result.best_val.accuracy << " at step "
      << result.best_step << "; checkpoint -> " << (out / "model.plck").string();
  note(msg.str());
}

struct TrainImageArgs {
  std::string train_csv;
  std::string val_csv;
  std::string model_config_path;
  std::string out_dir;
  TrainFlags flags;
  std::uint32_t seed = 7;
};

void run_train_image(const TrainImageArgs& args) {
  const TrainConfig tc = args.flags.resolved(args.seed);
  VisionModelConfig mc = load_json_file(args.model_config_path).get<VisionModelConfig>();
  mc.validate();

  VisionDataset train = load_vision_split(args.train_csv, mc);
  VisionDataset val = load_vision_split(args.val_csv, mc);

  VisionModel<float> model = VisionModel<float>::init(mc, tc.seed);
  TrainResult result = train_vision_model(model, train, val, tc);
  const VisionEvalReport final_val = evaluate_vision(model, val, tc.threshold);

  fs::create_directories(args.out_dir);
  const fs::path out(args.out_dir);
  write_history_csv((out / "history.csv").string(), result.history);
  nlohmann::json report = report_json(result.best_val, result);
  report["heads"] = final_val;
  write_text_file(out / "report.json", report.dump(2) + "\n");
  save_vision_model((out / "model.plck").string(), model, {{"val", final_val}});
  write_manifest(out / "run-manifest.json",
                 {{"tool", "protestlens"},
                  {"tool_version", kToolVersion},
                  {"subcommand", "train-image"},
                  {"inputs",
                   {{"train_images", args.train_csv},
                    {"val_images", args.val_csv},
                    {"model_config", args.model_config_path}}},
                  {"outputs",
                   {{"checkpoint", (out / "model.plck").string()},
                    {"history", (out / "history.csv").string()},
                    {"report", (out / "report.json").string()}}},
                  {"model_config", mc},
                  {"train", train_settings_json(tc)}});
  std::ostringstream msg;
  msg << "best val protest accuracy " << result.best_val.accuracy << " at step "
      << result.best_step << "; checkpoint -> " << (out / "model.plck").string();
  note(msg.str());
}

struct EvalArgs {
  std::string checkpoint_path;
  std::string corpus_path;
  std::string vocab_path;
  std::string images_csv;
  double threshold = 0.5;
  std::string out_dir;
};

void run_eval(const EvalArgs& args) {
  const Checkpoint ckpt = load_checkpoint(args.checkpoint_path);
  nlohmann::json report;
  if (ckpt.model_kind == "text") {
    if (args.corpus_path.empty() || args.vocab_path.empty()) {
      throw UsageFailure("eval on a text checkpoint needs --corpus and --vocab");
    }
    TextModel<float> model = load_text_model(args.checkpoint_path);
    Vocabulary vocab = Vocabulary::load(args.vocab_path);
    check_vocab_size(vocab, model.config);
    TextDataset ds = load_text_split(args.corpus_path, vocab, model.config);
    report = evaluate_text(model, ds, args.threshold);
  } else {
    if (args.images_csv.empty()) {
      throw UsageFailure("eval on a vision checkpoint needs --images");
    }
    VisionModel<float> model = load_vision_model(args.checkpoint_path);
    VisionDataset ds = load_vision_split(args.images_csv, model.config);
    report = evaluate_vision(model, ds, args.threshold);
  }
  std::cout << report.dump(2) << "\n";
  if (!args.out_dir.empty()) {
    fs::create_directories(args.out_dir);
    const fs::path out(args.out_dir);
    write_text_file(out / "report.json", report.dump(2) + "\n");
    write_manifest(out / "run-manifest.json",
                   {{"tool", "protestlens"},
                    {"tool_version", kToolVersion},
                    {"subcommand", "eval"},
                    {"inputs",
                     {{"checkpoint", args.checkpoint_path},
                      {"corpus", args.corpus_path},
                      {"vocabulary", args.vocab_path},
                      {"images", args.images_csv}}},
                    {"outputs", {{"report", (out / "report.json").string()}}},
                    {"settings", {{"threshold", args.threshold}}}});
  }
}

struct InferArgs {
  std::string checkpoint_path;
  std::string vocab_path;  // text only
  std::string input_path;  // empty = stdin
  std::string out_path;    // empty = stdout
};

/// Runs `handle` over input lines and streams JSONL to --out or stdout.
std::size_t for_each_input_line(const std::string& input_path,
                                const std::string& out_path,
                                const std::function<nlohmann::json(std::size_t, const std::string&)>& handle) {
  std::ifstream file;
  std::istream* in = &std::cin;
  if (!input_path.empty()) {
    file.open(input_path, std::ios::binary);
    if (!file) throw DataError("cannot open input file: " + input_path);
    in = &file;
  }
  std::ofstream out_file;
  std::ostream* out = &std::cout;
  if (!out_path.empty()) {
    if (fs::path(out_path).has_parent_path()) {
      fs::create_directories(fs::path(out_path).parent_path());
    }
    out_file.open(out_path, std::ios::binary);
    if (!out_file) throw DataError("cannot write file: " + out_path);
    out = &out_file;
  }
  std::string line;
  std::size_t id = 0;
  while (std::getline(*in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    ++id;
    (*out) << handle(id, line).dump() << "\n";
  }
  return id;
}

void infer_manifest(const InferArgs& args, const std::string& subcommand,
                    std::size_t n_lines) {
  if (args.out_path.empty()) return;  // pure stream to stdout, nothing to record
  nlohmann::json inputs{{"checkpoint", args.checkpoint_path},
                        {"input", args.input_path.empty() ? "-" : args.input_path}};
  if (!args.vocab_path.empty()) inputs["vocabulary"] = args.vocab_path;
  write_manifest(args.out_path + ".manifest.json",
                 {{"tool", "protestlens"},
                  {"tool_version", kToolVersion},
                  {"subcommand", subcommand},
                  {"inputs", inputs},
                  {"outputs", {{"predictions", args.out_path}}},
                  {"settings", {{"lines", n_lines}}}});
}

void run_infer_text(const InferArgs& args) {
  TextModel<float> model = load_text_model(args.checkpoint_path);
  Vocabulary vocab = Vocabulary::load(args.vocab_path);
  check_vocab_size(vocab, model.config);
  const std::size_t n =
      for_each_input_line(args.input_path, args.out_path,
                          [&](std::size_t id, const std::string& text) {
                            TextPrediction p = classify_text(text, vocab, model);
                            return nlohmann::json{{"id", id},
                                                  {"label", p.label},
                                                  {"probability", p.probability}};
                          });
  infer_manifest(args, "infer-text", n);
  if (!args.out_path.empty()) {
    note(std::to_string(n) + " predictions -> " + args.out_path);
  }
}

void run_infer_image(const InferArgs& args) {
  VisionModel<float> model = load_vision_model(args.checkpoint_path);
  const std::size_t n = for_each_input_line(
      args.input_path, args.out_path, [&](std::size_t id, const std::string& path) {
        Tensor<float> pixels = load_image(path, model.config.image_size);
        ImagePrediction p = classify_image(pixels, model);
        nlohmann::json probs = nlohmann::json::object();
        for (const auto& [name, prob] : p.attributes) probs[name] = prob;
        return nlohmann::json{{"id", id},
                              {"label", p.protest > 0.5 ? "protest" : "non-protest"},
                              {"probabilities", probs}};
      });
  infer_manifest(args, "infer-image", n);
  if (!args.out_path.empty()) {
    note(std::to_string(n) + " predictions -> " + args.out_path);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"protest news and image classification toolkit"};
  app.set_version_flag("--version", std::string("protestlens ") + kToolVersion);
  app.add_flag("-q,--quiet", quiet, "Suppress progress notes");
  app.require_subcommand(1);

  try {
    const std::uint32_t seed = default_seed();

    BuildCorpusArgs corpus_args;
    corpus_args.seed = seed;
    CLI::App* build_corpus_cmd = app.add_subcommand(
        "build-corpus", "Match event records to articles and emit labeled splits");
    build_corpus_cmd->add_option("--events", corpus_args.config.events_path,
                                 "Event records CSV")->required();
    build_corpus_cmd->add_option("--articles", corpus_args.config.articles_path,
                                 "Article archive JSONL")->required();
    build_corpus_cmd->add_option("--out", corpus_args.config.out_dir,
                                 "Output directory")->required();
    build_corpus_cmd->add_option("--negatives", corpus_args.config.negatives,
                                 "Negative examples to sample")
        ->capture_default_str();
    build_corpus_cmd->add_option("--fuzzy-threshold", corpus_args.config.fuzzy_threshold,
                                 "Minimum title similarity for a fuzzy match")
        ->capture_default_str();
    build_corpus_cmd->add_option("--train-ratio", corpus_args.config.ratios.train,
                                 "Train split fraction")->capture_default_str();
    build_corpus_cmd->add_option("--val-ratio", corpus_args.config.ratios.val,
                                 "Validation split fraction")->capture_default_str();
    build_corpus_cmd->add_option("--test-ratio", corpus_args.config.ratios.test,
                                 "Test split fraction")->capture_default_str();
    build_corpus_cmd->add_option("--seed", corpus_args.seed, "Sampling seed")
        ->capture_default_str();
    build_corpus_cmd->callback([&corpus_args] { run_build_corpus(corpus_args); });

    BuildVocabArgs vocab_args;
    CLI::App* build_vocab_cmd = app.add_subcommand(
        "build-vocab", "Count tokens in a corpus split and keep the most frequent");
    build_vocab_cmd->add_option("--corpus", vocab_args.corpus_path,
                                "Corpus JSONL to count (normally the train split)")
        ->required();
    build_vocab_cmd->add_option("--out", vocab_args.out_path, "Vocabulary file")
        ->required();
    build_vocab_cmd->add_option("--size", vocab_args.size, "Maximum kept tokens")
        ->capture_default_str();
    build_vocab_cmd->callback([&vocab_args] { run_build_vocab(vocab_args); });

    TrainTextArgs train_text_args;
    train_text_args.seed = seed;
    CLI::App* train_text_cmd =
        app.add_subcommand("train-text", "Fine-tune the text classifier");
    train_text_cmd->add_option("--corpus-dir", train_text_args.corpus_dir,
                               "Directory holding corpus.{train,val}.jsonl")
        ->required();
    train_text_cmd->add_option("--vocab", train_text_args.vocab_path, "Vocabulary file")
        ->required();
    train_text_cmd->add_option("--model-config", train_text_args.model_config_path,
                               "Model architecture JSON")->required();
    train_text_cmd->add_option("--out", train_text_args.out_dir, "Output directory")
        ->required();
    train_text_cmd->add_option("--seed", train_text_args.seed, "Training seed")
        ->capture_default_str();
    train_text_args.flags.attach(train_text_cmd, /*with_class_weights=*/true);
    train_text_cmd->callback([&train_text_args] { run_train_text(train_text_args); });

    TrainImageArgs train_image_args;
    train_image_args.seed = seed;
    CLI::App* train_image_cmd =
        app.add_subcommand("train-image", "Fine-tune the image classifier");
    train_image_cmd->add_option("--images", train_image_args.train_csv,
                                "Training label manifest CSV")->required();
    train_image_cmd->add_option("--val-images", train_image_args.val_csv,
                                "Validation label manifest CSV")->required();
    train_image_cmd->add_option("--model-config", train_image_args.model_config_path,
                                "Model architecture JSON")->required();
    train_image_cmd->add_option("--out", train_image_args.out_dir, "Output directory")
        ->required();
    train_image_cmd->add_option("--seed", train_image_args.seed, "Training seed")
        ->capture_default_str();
    train_image_args.flags.attach(train_image_cmd, /*with_class_weights=*/false);
    train_image_cmd->callback(
        [&train_image_args] { run_train_image(train_image_args); });

    EvalArgs eval_args;
    CLI::App* eval_cmd =
        app.add_subcommand("eval", "Score a checkpoint against a labeled split");
    eval_cmd->add_option("--checkpoint", eval_args.checkpoint_path, "Model checkpoint")
        ->required();
    eval_cmd->add_option("--corpus", eval_args.corpus_path,
                         "Corpus JSONL (text checkpoints)");
    eval_cmd->add_option("--vocab", eval_args.vocab_path,
                         "Vocabulary file (text checkpoints)");
    eval_cmd->add_option("--images", eval_args.images_csv,
                         "Label manifest CSV (vision checkpoints)");
    eval_cmd->add_option("--threshold", eval_args.threshold, "Decision threshold")
        ->capture_default_str();
    eval_cmd->add_option("--out", eval_args.out_dir,
                         "Directory for report.json (defaults to stdout only)");
    eval_cmd->callback([&eval_args] { run_eval(eval_args); });

    InferArgs infer_text_args;
    CLI::App* infer_text_cmd = app.add_subcommand(
        "infer-text", "Classify one text per input line; emits JSONL");
    infer_text_cmd->add_option("--checkpoint", infer_text_args.checkpoint_path,
                               "Model checkpoint")->required();
    infer_text_cmd->add_option("--vocab", infer_text_args.vocab_path, "Vocabulary file")
        ->required();
    infer_text_cmd->add_option("--input", infer_text_args.input_path,
                               "Input file (defaults to standard input)");
    infer_text_cmd->add_option("--out", infer_text_args.out_path,
                               "Output file (defaults to standard output)");
    infer_text_cmd->callback([&infer_text_args] { run_infer_text(infer_text_args); });

    InferArgs infer_image_args;
    CLI::App* infer_image_cmd = app.add_subcommand(
        "infer-image", "Classify one image path per input line; emits JSONL");
    infer_image_cmd->add_option("--checkpoint", infer_image_args.checkpoint_path,
                                "Model checkpoint")->required();
    infer_image_cmd->add_option("--input", infer_image_args.input_path,
                                "Input file (defaults to standard input)");
    infer_image_cmd->add_option("--out", infer_image_args.out_path,
                                "Output file (defaults to standard output)");
    infer_image_cmd->callback(
        [&infer_image_args] { run_infer_image(infer_image_args); });

    std::string inspect_path;
    CLI::App* inspect_cmd = app.add_subcommand(
        "inspect-checkpoint", "Print a checkpoint's header and tensor table");
    inspect_cmd->add_option("checkpoint", inspect_path, "Checkpoint file")->required();
    inspect_cmd->callback(
        [&inspect_path] { std::cout << inspect_checkpoint(inspect_path); });

    app.parse(argc, argv);
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    app.exit(e);
    return 1;
  } catch (const UsageFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
