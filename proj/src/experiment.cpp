#include "mudaf/experiment.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <fstream>

#include "json_util.hpp"
#include "mudaf/checkpoint.hpp"
#include "mudaf/corpus.hpp"
#include "mudaf/dataset_io.hpp"
#include "mudaf/errors.hpp"
#include "mudaf/hashing.hpp"
#include "mudaf/report.hpp"
#include "mudaf/retrieval.hpp"
#include "mudaf/rng.hpp"
#include "mudaf/selection.hpp"
#include "mudaf/trainer.hpp"

namespace mudaf {

namespace fs = std::filesystem;

namespace {

constexpr const char* kRunFormat = "mudaf-run-v1";
constexpr std::uint64_t kInitStream = 0x696e6974ULL;
constexpr std::uint64_t kDataStream = 0x64617461ULL;
constexpr std::uint64_t kSelectStream = 0x73656c65ULL;
constexpr std::uint64_t kReportStream = 0x72657074ULL;

nlohmann::json read_json(const fs::path& path) { return detail::parse_json(read_file(path), path.string()); }

CorpusConfig load_corpus_config(const std::optional<fs::path>& path) {
    CorpusConfig c;
    if (path) c = read_json(*path).get<CorpusConfig>();
    c.validate();
    return c;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

// Leaves the file alone when its content would not change.
bool write_if_changed(const fs::path& path, const std::string& content) {
    if (fs::exists(path) && read_file(path) == content) return false;
    write_file_atomic(path, content);
    return true;
}

std::string relpath(const fs::path& p, const fs::path& root) { return fs::relative(p, root).generic_string(); }

std::vector<MdqaSample> load_dataset(const fs::path& path, const Corpus& corpus, std::optional<std::size_t> limit) {
    auto samples = read_dataset(path, corpus);
    if (limit && *limit < samples.size()) samples.resize(*limit);
    require(!samples.empty(), ErrorKind::input, "dataset " + path.string() + " is empty");
    return samples;
}

Model load_model_for(const fs::path& checkpoint, const Corpus& corpus) {
    Model model = model_from_checkpoint(load_checkpoint(checkpoint));
    require(model.config().vocab_size == corpus.vocab().size(), ErrorKind::config,
            "checkpoint vocabulary (" + std::to_string(model.config().vocab_size) + ") does not match the corpus grammar (" +
                std::to_string(corpus.vocab().size()) + ")");
    return model;
}

HeadScoreTable load_scores(const fs::path& path) { return read_json(path).get<HeadScoreTable>(); }

nlohmann::json artifact_index(const fs::path& root) {
    nlohmann::json index = nlohmann::json::object();
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        const std::string name = entry.path().filename().string();
        if (name == "manifest.json" && entry.path().parent_path() == root) continue;
        if (name == ".lock" || name.ends_with(".tmp")) continue;
        files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) index[relpath(f, root)] = "sha256:" + sha256_file(f);
    return index;
}

// Everything needed to reproduce a training run.
struct TrainPlan {
    std::string mode;
    std::uint64_t master_seed = 0;
    CorpusConfig corpus;
    ModelConfig model;
    TrainConfig train;
    nlohmann::json selection;
    nlohmann::json dataset;
    nlohmann::json init;
};

nlohmann::json plan_to_json(const TrainPlan& p) {
    return {{"mode", p.mode},           {"master_seed", p.master_seed}, {"corpus_config", p.corpus},
            {"model_config", p.model},  {"train_config", p.train},      {"selection", p.selection},
            {"dataset", p.dataset},     {"init", p.init}};
}

TrainPlan plan_from_json(const nlohmann::json& j) {
    TrainPlan p;
    try {
        p.mode = j.at("mode").get<std::string>();
        p.master_seed = j.at("master_seed").get<std::uint64_t>();
        p.corpus = j.at("corpus_config").get<CorpusConfig>();
        p.model = j.at("model_config").get<ModelConfig>();
        p.train = j.at("train_config").get<TrainConfig>();
        p.selection = j.at("selection");
        p.dataset = j.at("dataset");
        p.init = j.at("init");
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::input, std::string("malformed run manifest: ") + e.what());
    }
    return p;
}

std::vector<MdqaSample> plan_dataset(const TrainPlan& plan, const Corpus& corpus) {
    const std::string source = plan.dataset.at("source").get<std::string>();
    if (source == "generated") {
        return corpus.generate_dataset(plan.dataset.at("n").get<std::size_t>(), plan.dataset.at("seed").get<std::uint64_t>());
    }
    const fs::path path = plan.dataset.at("path").get<std::string>();
    const std::string expected = plan.dataset.at("sha256").get<std::string>();
    require(sha256_file(path) == expected, ErrorKind::input, "dataset " + path.string() + " changed since the run was recorded");
    return load_dataset(path, corpus, std::nullopt);
}

Checkpoint plan_init(const TrainPlan& plan) {
    const std::string source = plan.init.at("source").get<std::string>();
    if (source == "seed") return make_checkpoint(Model(plan.model, plan.init.at("seed").get<std::uint64_t>()));
    const fs::path path = plan.init.at("path").get<std::string>();
    const std::string expected = plan.init.at("manifest_sha256").get<std::string>();
    require(sha256_file(path / "manifest.json") == expected, ErrorKind::input,
            "initial checkpoint " + path.string() + " changed since the run was recorded");
    Checkpoint c = load_checkpoint(path);
    require(c.config == plan.model, ErrorKind::config, "initial checkpoint architecture differs from the model config");
    return c;
}

void prepare_run_dir(const fs::path& root, bool resume) {
    if (fs::exists(root)) {
        require(fs::is_directory(root), ErrorKind::usage, root.string() + " is not a directory");
        bool empty = true;
        for (const auto& entry : fs::directory_iterator(root)) empty = empty && entry.path().filename() == ".lock";
        require(empty || resume, ErrorKind::usage,
                "run directory " + root.string() + " is not empty; pass --resume to continue it or choose a new directory");
    }
    fs::create_directories(root);
}

}  // namespace

RunLock::RunLock(const fs::path& run_dir) : path_(run_dir / ".lock") {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        if (errno == EEXIST) fail(ErrorKind::usage, "run directory " + run_dir.string() + " is locked by another command");
        fail(ErrorKind::io, "cannot create lock file " + path_.string() + ": " + std::strerror(errno));
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto written = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

RunLock::~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

std::uint64_t resolve_master_seed(std::uint64_t fallback) {
    const char* env = std::getenv(kSeedEnvVar);
    if (env == nullptr || *env == '\0') return fallback;
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(env, &used, 10);
        require(used == std::strlen(env), ErrorKind::config, "");
        return v;
    } catch (const std::exception&) {
        fail(ErrorKind::config, std::string(kSeedEnvVar) + " must be a non-negative integer, got '" + env + "'");
    }
}

CommandResult cmd_gen_data(const GenDataOptions& options) {
    require(!options.out.empty(), ErrorKind::usage, "gen-data needs --out");
    require(options.kind == "mdqa" || options.kind == "needle", ErrorKind::usage, "--kind must be mdqa or needle");
    require(options.force || !fs::exists(options.out), ErrorKind::io,
            "refusing to overwrite " + options.out.string() + " without --force");
    const Corpus corpus(load_corpus_config(options.corpus_config));
    const std::uint64_t seed = resolve_master_seed(options.seed);
    const auto samples =
        corpus.generate_dataset(options.n, seed, options.kind == "mdqa" ? SampleKind::mdqa : SampleKind::needle);
    if (options.out.has_parent_path()) fs::create_directories(options.out.parent_path());
    write_dataset(options.out, samples, corpus.vocab());
    return {{{"out", options.out.string()},
             {"n", samples.size()},
             {"seed", seed},
             {"kind", options.kind},
             {"vocab_size", corpus.vocab().size()},
             {"sha256", sha256_file(options.out)}},
            {}};
}

CommandResult cmd_score_heads(const ScoreHeadsOptions& options) {
    require(!options.out.empty(), ErrorKind::usage, "score-heads needs --out");
    const Corpus corpus(load_corpus_config(options.corpus_config));
    const Model model = load_model_for(options.checkpoint, corpus);
    const auto samples = load_dataset(options.dataset, corpus, options.limit);
    AnalysisConfig analysis;
    analysis.epsilon = options.epsilon;
    require(options.epsilon >= 0.0, ErrorKind::usage, "--epsilon must be non-negative");
    analysis.token = attribution_token_from_string(options.token);
    require(options.kind == "mdqa" || options.kind == "copy-paste", ErrorKind::usage, "--kind must be mdqa or copy-paste");
    analysis.kind = options.kind == "mdqa" ? ScoreKind::mdqa : ScoreKind::copy_paste;
    analysis.eval_set_id = "sha256:" + sha256_file(options.dataset);
    const HeadScoreTable table = score_heads(model, samples, analysis);

    fs::path json_path = options.out, csv_path = options.out;
    json_path += ".json";
    csv_path += ".csv";
    if (options.out.has_parent_path()) fs::create_directories(options.out.parent_path());
    write_json(json_path, table);
    write_file_atomic(csv_path, to_csv(table));
    nlohmann::json top = nlohmann::json::array();
    for (const auto& h : table.top_k(std::min<std::size_t>(5, table.rows.size()))) {
        top.push_back({{"head", h.label()}, {"f1", table.at(h).f1}, {"em", table.at(h).em}});
    }
    return {{{"json", json_path.string()}, {"csv", csv_path.string()}, {"n_samples", table.n_samples}, {"top", top}}, {}};
}

CommandResult cmd_train(const TrainOptions& options) {
    require(!options.run_dir.empty(), ErrorKind::usage, "train needs --run-dir");
    CommandResult result;
    TrainPlan plan;
    nlohmann::json inputs = nlohmann::json::object();
    const RunPaths paths{options.run_dir};
    bool resuming = false;

    if (options.resume && fs::exists(paths.manifest())) {
        resuming = true;
        plan = plan_from_json(read_json(paths.manifest()).at("snapshot"));
    } else if (options.from_manifest) {
        const nlohmann::json manifest = read_json(*options.from_manifest);
        require(manifest.value("format", "") == kRunFormat, ErrorKind::input,
                options.from_manifest->string() + " is not a run manifest");
        plan = plan_from_json(manifest.at("snapshot"));
        inputs["from_manifest"] = "sha256:" + sha256_file(*options.from_manifest);
    } else {
        require(options.mode == "vanilla" || options.mode == "mudaf" || options.mode == "mudaf-weak", ErrorKind::usage,
                "--mode must be vanilla, mudaf or mudaf-weak");
        plan.mode = options.mode;
        plan.corpus = load_corpus_config(options.corpus_config);
        const Corpus corpus(plan.corpus);
        if (options.corpus_config) inputs["corpus_config"] = "sha256:" + sha256_file(*options.corpus_config);

        if (options.model_config) {
            nlohmann::json mj = read_json(*options.model_config);
            if (!mj.contains("vocab_size")) mj["vocab_size"] = corpus.vocab().size();
            plan.model = mj.get<ModelConfig>();
            inputs["model_config"] = "sha256:" + sha256_file(*options.model_config);
        } else {
            plan.model.vocab_size = corpus.vocab().size();
        }
        plan.model.validate();
        require(plan.model.vocab_size == corpus.vocab().size(), ErrorKind::config,
                "model vocab_size must equal the corpus vocabulary size " + std::to_string(corpus.vocab().size()));
        require(plan.model.max_seq_len >= corpus.max_rendered_length(), ErrorKind::config,
                "model max_seq_len " + std::to_string(plan.model.max_seq_len) + " is shorter than the longest prompt (" +
                    std::to_string(corpus.max_rendered_length()) + " tokens)");

        if (options.train_config) {
            plan.train = read_json(*options.train_config).get<TrainConfig>();
            inputs["train_config"] = "sha256:" + sha256_file(*options.train_config);
        }
        plan.master_seed = resolve_master_seed(options.seed.value_or(plan.train.master_seed));
        plan.train.master_seed = plan.master_seed;

        SelectionConfig selection;
        bool selection_seed_given = false;
        if (options.selection_config) {
            const nlohmann::json sj = read_json(*options.selection_config);
            selection = sj.get<SelectionConfig>();
            selection_seed_given = sj.contains("seed");
            inputs["selection_config"] = "sha256:" + sha256_file(*options.selection_config);
        }
        if (!selection_seed_given) selection.seed = derive_seed(plan.master_seed, kSelectStream);

        if (plan.mode == "vanilla") {
            if (options.heads) result.warnings.push_back("vanilla mode ignores --heads");
            plan.train.lambda = 0.0;
            plan.train.target_heads.clear();
            plan.selection = {{"source", "none"}};
        } else {
            const std::string heads = options.heads.value_or("auto");
            if (heads == "auto") {
                require(options.scores.has_value(), ErrorKind::usage, "automatic head selection needs --scores");
                const HeadScoreTable table = load_scores(*options.scores);
                require(table.n_layers == plan.model.n_layers && table.n_heads == plan.model.n_heads, ErrorKind::config,
                        "score table geometry does not match the model");
                if (plan.mode == "mudaf-weak") selection.mode = SelectionMode::weak;
                plan.train.target_heads = sample_heads(table, selection);
                inputs["scores"] = "sha256:" + sha256_file(*options.scores);
                plan.selection = {{"source", "auto"}, {"config", selection}, {"scores_sha256", inputs["scores"]}};
            } else {
                plan.train.target_heads = heads_from_json(read_json(heads));
                inputs["heads"] = "sha256:" + sha256_file(heads);
                plan.selection = {{"source", "file"}};
            }
            require(!plan.train.target_heads.empty(), ErrorKind::config, plan.mode + " mode needs at least one target head");
            for (const auto& h : plan.train.target_heads) head_index(h, plan.model);
            plan.selection["heads"] = plan.train.target_heads;
        }
        plan.train.validate();

        if (options.dataset) {
            plan.dataset = {{"source", "file"},
                            {"path", fs::absolute(*options.dataset).string()},
                            {"sha256", sha256_file(*options.dataset)}};
            inputs["dataset"] = "sha256:" + plan.dataset["sha256"].get<std::string>();
        } else {
            plan.dataset = {{"source", "generated"}, {"n", options.n_train}, {"seed", derive_seed(plan.master_seed, kDataStream)}};
        }
        if (options.init_checkpoint) {
            plan.init = {{"source", "checkpoint"},
                         {"path", fs::absolute(*options.init_checkpoint).string()},
                         {"manifest_sha256", sha256_file(*options.init_checkpoint / "manifest.json")}};
            inputs["init_checkpoint"] = "sha256:" + plan.init["manifest_sha256"].get<std::string>();
        } else {
            plan.init = {{"source", "seed"}, {"seed", derive_seed(plan.master_seed, kInitStream)}};
        }
    }

    prepare_run_dir(options.run_dir, resuming);
    RunLock lock(options.run_dir);
    fs::create_directories(paths.config_dir());
    fs::create_directories(paths.checkpoints_dir());
    fs::create_directories(paths.scores_dir());
    fs::create_directories(paths.reports_dir());

    const Corpus corpus(plan.corpus);
    const auto dataset = plan_dataset(plan, corpus);
    const Checkpoint start = resuming ? load_checkpoint(paths.final_checkpoint()) : plan_init(plan);

    if (!resuming) {
        // Input config files are echoed verbatim for provenance.
        const auto echo = [&](const std::optional<fs::path>& src, const char* name, const nlohmann::json& resolved) {
            if (src && !options.from_manifest) {
                write_file_atomic(paths.config_dir() / name, read_file(*src));
            } else {
                write_json(paths.config_dir() / name, resolved);
            }
        };
        echo(options.corpus_config, "corpus.json", plan.corpus);
        echo(options.model_config, "model.json", plan.model);
        echo(options.train_config, "train.json", plan.train);
        write_json(paths.config_dir() / "heads.json", heads_to_json(plan.train.target_heads));
        write_json(paths.config_dir() / "resolved.json", plan_to_json(plan));
    }

    const TrainResult trained = train_run(start, plan.train, corpus, dataset, {nullptr, paths.root / "diagnostics"});
    std::string metrics = resuming && fs::exists(paths.metrics()) ? read_file(paths.metrics()) : std::string();
    for (const auto& m : trained.metrics) metrics += to_json_line(m).dump() + "\n";
    write_file_atomic(paths.metrics(), metrics);
    save_checkpoint(trained.checkpoint, paths.final_checkpoint());

    nlohmann::json manifest;
    manifest["format"] = kRunFormat;
    manifest["command"] = "train";
    manifest["snapshot"] = plan_to_json(plan);
    if (resuming) {
        const nlohmann::json old = read_json(paths.manifest());
        manifest["inputs"] = old.at("inputs");
        manifest["resumed"] = old.value("resumed", 0) + 1;
    } else {
        manifest["inputs"] = inputs;
    }
    manifest["final_step"] = trained.checkpoint.step;
    manifest["artifacts"] = artifact_index(paths.root);
    write_json(paths.manifest(), manifest);

    const auto& last = trained.metrics.empty() ? StepMetrics{} : trained.metrics.back();
    result.summary = {{"run_dir", paths.root.string()},
                      {"mode", plan.mode},
                      {"steps", trained.metrics.size()},
                      {"final_step", trained.checkpoint.step},
                      {"target_heads", plan.train.target_heads},
                      {"final_loss", to_json_line(last)},
                      {"checkpoint_sha256", manifest["artifacts"].value("checkpoints/final/weights.bin", "")}};
    return result;
}

CommandResult cmd_mask_eval(const MaskEvalOptions& options) {
    require(!options.out.empty(), ErrorKind::usage, "mask-eval needs --out");
    const Corpus corpus(load_corpus_config(options.corpus_config));
    const Model model = load_model_for(options.checkpoint, corpus);
    const auto samples = load_dataset(options.dataset, corpus, options.limit);
    const HeadScoreTable scores = load_scores(options.scores);
    std::optional<HeadScoreTable> niah;
    if (options.niah_scores) niah = load_scores(*options.niah_scores);

    MaskingConfig config;
    config.strategies.clear();
    for (const auto& s : options.strategies) config.strategies.push_back(mask_strategy_from_string(s));
    config.k = options.k;
    if (options.top_fraction) {
        require(*options.top_fraction > 0.0 && *options.top_fraction <= 1.0, ErrorKind::usage,
                "--top-fraction must lie in (0, 1]");
        const double total = static_cast<double>(model.config().total_heads());
        config.k = static_cast<std::size_t>(std::ceil(*options.top_fraction * total - 1e-9));
    }
    config.repeats = options.repeats;
    config.seed = resolve_master_seed(options.seed);
    const MaskingReport report =
        masking_experiment(model, samples, corpus.vocab().id(kEosToken), scores, niah ? &*niah : nullptr, config);

    fs::path json_path = options.out, csv_path = options.out;
    json_path += ".json";
    csv_path += ".csv";
    if (options.out.has_parent_path()) fs::create_directories(options.out.parent_path());
    write_json(json_path, report);
    write_file_atomic(csv_path, to_csv(report));
    nlohmann::json means = nlohmann::json::object();
    for (MaskStrategy s : config.strategies) means[std::string(to_string(s))] = report.mean_exact_match(s);
    return {{{"json", json_path.string()},
             {"csv", csv_path.string()},
             {"baseline_exact_match", report.baseline_exact_match},
             {"mean_exact_match", means}},
            {}};
}

CommandResult cmd_report(const ReportOptions& options) {
    const RunPaths paths{options.run_dir};
    require(fs::is_directory(paths.root), ErrorKind::io, "no run directory at " + paths.root.string());
    fs::create_directories(paths.reports_dir());
    std::vector<std::string> written, unchanged;
    const auto emit = [&](const std::string& name, const std::string& content) {
        (write_if_changed(paths.reports_dir() / name, content) ? written : unchanged).push_back(name);
    };

    std::vector<fs::path> tables;
    if (fs::is_directory(paths.scores_dir())) {
        for (const auto& entry : fs::directory_iterator(paths.scores_dir())) {
            if (entry.path().extension() == ".json") tables.push_back(entry.path());
        }
    }
    std::sort(tables.begin(), tables.end());
    for (const auto& t : tables) {
        const HeadScoreTable table = load_scores(t);
        const std::string stem = t.stem().string();
        emit("curve_" + stem + ".csv", score_curve_csv(table));
        emit("curve_" + stem + ".svg", score_curve_svg(table));
    }

    const fs::path before = paths.scores_dir() / "before.json", after = paths.scores_dir() / "after.json";
    const fs::path heads_file = paths.config_dir() / "heads.json";
    if (fs::exists(before) && fs::exists(after) && fs::exists(heads_file)) {
        const auto heads = heads_from_json(read_json(heads_file));
        if (!heads.empty()) {
            const auto changes = score_changes(load_scores(before), load_scores(after), heads);
            emit("score_changes.csv", score_changes_csv(changes));
            emit("score_changes.svg", score_changes_svg(changes));
        }
    }

    const fs::path resolved = paths.config_dir() / "resolved.json";
    if (fs::exists(paths.final_checkpoint() / "manifest.json") && fs::exists(resolved)) {
        const TrainPlan plan = plan_from_json(read_json(resolved));
        const Corpus corpus(plan.corpus);
        const Model model = load_model_for(paths.final_checkpoint(), corpus);
        const MdqaSample sample = corpus.generate_sample(derive_seed(plan.master_seed, kReportStream));
        std::vector<std::size_t> layers(model.config().n_layers);
        for (std::size_t l = 0; l < layers.size(); ++l) layers[l] = l;
        const LayerHeatmap map = layer_heatmap(model, sample, layers, AttributionToken::prompt_last);
        emit("heatmap.csv", heatmap_csv(map));
        emit("heatmap.svg", heatmap_svg(map));
    }
    return {{{"reports_dir", paths.reports_dir().string()}, {"written", written}, {"unchanged", unchanged}}, {}};
}

}  // namespace mudaf
