#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace mudaf {

// Fixed layout of a run directory.
struct RunPaths {
    std::filesystem::path root;

    std::filesystem::path config_dir() const { return root / "config"; }
    std::filesystem::path checkpoints_dir() const { return root / "checkpoints"; }
    std::filesystem::path final_checkpoint() const { return checkpoints_dir() / "final"; }
    std::filesystem::path metrics() const { return root / "metrics.jsonl"; }
    std::filesystem::path scores_dir() const { return root / "scores"; }
    std::filesystem::path reports_dir() const { return root / "reports"; }
    std::filesystem::path manifest() const { return root / "manifest.json"; }
    std::filesystem::path lock() const { return root / ".lock"; }
};

// Exclusive ownership of a run directory for the lifetime of the object.
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& run_dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::filesystem::path path_;
};

// Name of the environment variable that overrides the master seed.
inline constexpr const char* kSeedEnvVar = "MUDAF_LAB_SEED";

// The MUDAF_LAB_SEED value when set, otherwise `fallback`.
std::uint64_t resolve_master_seed(std::uint64_t fallback);

struct CommandResult {
    nlohmann::json summary;
    std::vector<std::string> warnings;
};

struct GenDataOptions {
    std::optional<std::filesystem::path> corpus_config;
    std::size_t n = 0;
    std::uint64_t seed = 0;
    std::filesystem::path out;
    bool force = false;
    std::string kind = "mdqa";
};

CommandResult cmd_gen_data(const GenDataOptions& options);

struct ScoreHeadsOptions {
    std::filesystem::path checkpoint;
    std::filesystem::path dataset;
    std::optional<std::filesystem::path> corpus_config;
    double epsilon = 0.1;
    std::string token = "prompt_last";
    std::string kind = "mdqa";
    std::optional<std::size_t> limit;
    // Writes <out>.csv and <out>.json.
    std::filesystem::path out;
};

CommandResult cmd_score_heads(const ScoreHeadsOptions& options);

struct TrainOptions {
    std::filesystem::path run_dir;
    // Replays the run recorded in this manifest; the other inputs are ignored.
    std::optional<std::filesystem::path> from_manifest;

    std::optional<std::filesystem::path> corpus_config;
    std::optional<std::filesystem::path> model_config;
    std::optional<std::filesystem::path> train_config;
    std::optional<std::filesystem::path> selection_config;
    std::string mode = "mudaf";
    // "auto" or a JSON head list.
    std::optional<std::string> heads;
    // Score table used by automatic head selection.
    std::optional<std::filesystem::path> scores;
    std::optional<std::filesystem::path> init_checkpoint;
    std::optional<std::filesystem::path> dataset;
    std::size_t n_train = 2000;
    std::optional<std::uint64_t> seed;
    bool resume = false;
};

CommandResult cmd_train(const TrainOptions& options);

struct MaskEvalOptions {
    std::filesystem::path checkpoint;
    std::filesystem::path dataset;
    std::optional<std::filesystem::path> corpus_config;
    std::filesystem::path scores;
    std::optional<std::filesystem::path> niah_scores;
    std::vector<std::string> strategies = {"top", "random"};
    std::size_t k = 8;
    // When set, k = ceil(top_fraction * total heads).
    std::optional<double> top_fraction;
    std::size_t repeats = 3;
    std::uint64_t seed = 0;
    std::optional<std::size_t> limit;
    std::filesystem::path out;
};

CommandResult cmd_mask_eval(const MaskEvalOptions& options);

struct ReportOptions {
    std::filesystem::path run_dir;
};

// Regenerates reports/ from the run's scores and final checkpoint. Files
// whose content is unchanged are left untouched.
CommandResult cmd_report(const ReportOptions& options);

}  // namespace mudaf
