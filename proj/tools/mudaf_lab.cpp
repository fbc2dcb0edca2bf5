// mudaf-lab: command-line front end for the head-retrieval laboratory.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "mudaf/errors.hpp"
#include "mudaf/experiment.hpp"

namespace {

void emit_error(std::string_view kind, std::string_view message) {
    nlohmann::json err = {{"error", {{"kind", kind}, {"message", message}}}};
    std::cerr << err.dump() << std::endl;
}

void emit(const mudaf::CommandResult& r) {
    for (const auto& w : r.warnings) std::cerr << nlohmann::json{{"warning", w}}.dump() << std::endl;
    std::cout << r.summary.dump(2) << std::endl;
}

template <typename T>
std::optional<T> opt_if(CLI::Option* o, const T& value) {
    return o->count() ? std::optional<T>(value) : std::nullopt;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Retrieval-head analysis and attention-focused training on a toy transformer"};
    app.require_subcommand(1);

    // gen-data
    mudaf::GenDataOptions gen;
    std::string gen_corpus;
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate a JSON-lines multi-document QA dataset");
    auto* gen_corpus_opt = gen_cmd->add_option("--corpus-config", gen_corpus, "Corpus config JSON")->check(CLI::ExistingFile);
    gen_cmd->add_option("--n", gen.n, "Number of samples")->required();
    gen_cmd->add_option("--seed", gen.seed, "Master seed");
    gen_cmd->add_option("--out", gen.out, "Output .jsonl path")->required();
    gen_cmd->add_option("--kind", gen.kind, "mdqa or needle")->check(CLI::IsMember({"mdqa", "needle"}));
    gen_cmd->add_flag("--force", gen.force, "Overwrite an existing file");

    // score-heads
    mudaf::ScoreHeadsOptions score;
    std::string score_corpus;
    std::size_t score_limit = 0;
    auto* score_cmd = app.add_subcommand("score-heads", "Score every attention head's passage retrieval");
    score_cmd->add_option("--checkpoint", score.checkpoint, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    score_cmd->add_option("--dataset", score.dataset, "Evaluation dataset")->required()->check(CLI::ExistingFile);
    auto* score_corpus_opt = score_cmd->add_option("--corpus-config", score_corpus, "Corpus config JSON")->check(CLI::ExistingFile);
    score_cmd->add_option("--epsilon", score.epsilon, "Attended-set threshold");
    score_cmd->add_option("--token", score.token, "prompt_last or question_last")
        ->check(CLI::IsMember({"prompt_last", "question_last"}));
    score_cmd->add_option("--kind", score.kind, "mdqa or copy-paste")->check(CLI::IsMember({"mdqa", "copy-paste"}));
    auto* score_limit_opt = score_cmd->add_option("--limit", score_limit, "Use only the first N samples");
    score_cmd->add_option("--out", score.out, "Output prefix; writes <out>.csv and <out>.json")->required();

    // train
    mudaf::TrainOptions train;
    std::string t_manifest, t_corpus, t_model, t_train, t_select, t_heads, t_scores, t_init, t_dataset;
    std::uint64_t t_seed = 0;
    auto* train_cmd = app.add_subcommand("train", "Train a model (vanilla, mudaf or mudaf-weak)");
    train_cmd->add_option("--run-dir", train.run_dir, "Run directory")->required();
    auto* t_manifest_opt = train_cmd->add_option("--from-manifest", t_manifest, "Replay a recorded run")->check(CLI::ExistingFile);
    auto* t_corpus_opt = train_cmd->add_option("--corpus-config", t_corpus, "Corpus config JSON")->check(CLI::ExistingFile);
    auto* t_model_opt = train_cmd->add_option("--model-config", t_model, "Model config JSON")->check(CLI::ExistingFile);
    auto* t_train_opt = train_cmd->add_option("--train-config", t_train, "Train config JSON")->check(CLI::ExistingFile);
    auto* t_select_opt = train_cmd->add_option("--selection-config", t_select, "Selection config JSON")->check(CLI::ExistingFile);
    train_cmd->add_option("--mode", train.mode, "vanilla, mudaf or mudaf-weak")
        ->check(CLI::IsMember({"vanilla", "mudaf", "mudaf-weak"}));
    auto* t_heads_opt = train_cmd->add_option("--heads", t_heads, "'auto' or a JSON head list file");
    auto* t_scores_opt = train_cmd->add_option("--scores", t_scores, "Score table for automatic selection")->check(CLI::ExistingFile);
    auto* t_init_opt = train_cmd->add_option("--init", t_init, "Initial checkpoint")->check(CLI::ExistingDirectory);
    auto* t_dataset_opt = train_cmd->add_option("--dataset", t_dataset, "Training dataset")->check(CLI::ExistingFile);
    train_cmd->add_option("--n-train", train.n_train, "Generated training samples when --dataset is absent");
    auto* t_seed_opt = train_cmd->add_option("--seed", t_seed, "Master seed");
    train_cmd->add_flag("--resume", train.resume, "Continue training in an existing run directory");

    // mask-eval
    mudaf::MaskEvalOptions mask;
    std::string m_corpus, m_niah;
    std::size_t m_limit = 0;
    auto* mask_cmd = app.add_subcommand("mask-eval", "QA accuracy with groups of heads masked");
    mask_cmd->add_option("--checkpoint", mask.checkpoint, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    mask_cmd->add_option("--dataset", mask.dataset, "Evaluation dataset")->required()->check(CLI::ExistingFile);
    auto* m_corpus_opt = mask_cmd->add_option("--corpus-config", m_corpus, "Corpus config JSON")->check(CLI::ExistingFile);
    mask_cmd->add_option("--scores", mask.scores, "MDQA score table")->required()->check(CLI::ExistingFile);
    auto* m_niah_opt = mask_cmd->add_option("--niah-scores", m_niah, "Copy-paste score table")->check(CLI::ExistingFile);
    mask_cmd->add_option("--strategy", mask.strategies, "top, random or niah-proxy (repeatable)")
        ->check(CLI::IsMember({"top", "random", "niah-proxy"}));
    mask_cmd->add_option("--k", mask.k, "Heads masked per condition");
    double m_fraction = 0.05;
    auto* m_fraction_opt = mask_cmd->add_option("--top-fraction", m_fraction, "Mask this fraction of all heads instead of --k");
    mask_cmd->add_option("--repeats", mask.repeats, "Seeds for the random strategy");
    mask_cmd->add_option("--seed", mask.seed, "Seed for the random strategy");
    auto* m_limit_opt = mask_cmd->add_option("--limit", m_limit, "Use only the first N samples");
    mask_cmd->add_option("--out", mask.out, "Output prefix; writes <out>.csv and <out>.json")->required();

    // report
    mudaf::ReportOptions report;
    auto* report_cmd = app.add_subcommand("report", "Write CSV and SVG reports for a run directory");
    report_cmd->add_option("--run-dir", report.run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        emit_error("usage", e.what());
        return 2;
    }

    try {
        if (gen_cmd->parsed()) {
            gen.corpus_config = opt_if<std::filesystem::path>(gen_corpus_opt, gen_corpus);
            emit(mudaf::cmd_gen_data(gen));
        } else if (score_cmd->parsed()) {
            score.corpus_config = opt_if<std::filesystem::path>(score_corpus_opt, score_corpus);
            score.limit = opt_if(score_limit_opt, score_limit);
            emit(mudaf::cmd_score_heads(score));
        } else if (train_cmd->parsed()) {
            train.from_manifest = opt_if<std::filesystem::path>(t_manifest_opt, t_manifest);
            train.corpus_config = opt_if<std::filesystem::path>(t_corpus_opt, t_corpus);
            train.model_config = opt_if<std::filesystem::path>(t_model_opt, t_model);
            train.train_config = opt_if<std::filesystem::path>(t_train_opt, t_train);
            train.selection_config = opt_if<std::filesystem::path>(t_select_opt, t_select);
            train.heads = opt_if(t_heads_opt, t_heads);
            train.scores = opt_if<std::filesystem::path>(t_scores_opt, t_scores);
            train.init_checkpoint = opt_if<std::filesystem::path>(t_init_opt, t_init);
            train.dataset = opt_if<std::filesystem::path>(t_dataset_opt, t_dataset);
            train.seed = opt_if(t_seed_opt, t_seed);
            emit(mudaf::cmd_train(train));
        } else if (mask_cmd->parsed()) {
            mask.corpus_config = opt_if<std::filesystem::path>(m_corpus_opt, m_corpus);
            mask.niah_scores = opt_if<std::filesystem::path>(m_niah_opt, m_niah);
            mask.limit = opt_if(m_limit_opt, m_limit);
            mask.top_fraction = opt_if(m_fraction_opt, m_fraction);
            emit(mudaf::cmd_mask_eval(mask));
        } else if (report_cmd->parsed()) {
            emit(mudaf::cmd_report(report));
        }
    } catch (const mudaf::Error& e) {
        emit_error(mudaf::to_string(e.kind()), e.message());
        return 1;
    } catch (const std::exception& e) {
        emit_error("internal", e.what());
        return 1;
    }
    return 0;
}
