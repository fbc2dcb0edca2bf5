#include "mudaf/trainer.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include "json_util.hpp"
#include "mudaf/errors.hpp"
#include "mudaf/hashing.hpp"
#include "mudaf/ops.hpp"
#include "mudaf/rng.hpp"

namespace mudaf {

namespace {

constexpr std::uint64_t kOrderStream = 0x6f72646572ULL;
constexpr std::uint64_t kShuffleStream = 0x73687566ULL;

std::string_view to_string(LrSchedule s) { return s == LrSchedule::cosine ? "cosine" : "constant"; }

LrSchedule schedule_from_string(std::string_view text) {
    if (text == "cosine") return LrSchedule::cosine;
    if (text == "constant") return LrSchedule::constant;
    fail(ErrorKind::config, "unknown learning-rate schedule '" + std::string(text) + "'");
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t master_seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(master_seed, kOrderStream, epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

bool contrastive_active(const TrainConfig& config) { return config.lambda > 0.0 && !config.target_heads.empty(); }

void write_diagnostic(const std::filesystem::path& dir, std::size_t step, const std::vector<MdqaSample>& batch,
                      const TrainConfig& config, const std::string& reason) {
    if (dir.empty()) return;
    nlohmann::json dump;
    dump["step"] = step;
    dump["reason"] = reason;
    dump["train_config"] = config;
    for (const auto& s : batch) {
        dump["batch"].push_back({{"seed", s.seed}, {"tokens", s.layout.tokens}, {"golden_indices", s.golden_indices}});
    }
    std::filesystem::create_directories(dir);
    write_file_atomic(dir / ("nonfinite_step_" + std::to_string(step) + ".json"), dump.dump(2) + "\n");
}

}  // namespace

void TrainConfig::validate() const {
    require(std::isfinite(lambda) && lambda >= 0.0, ErrorKind::config, "lambda must be non-negative");
    require(tau_con > 0.0, ErrorKind::config, "tau_con must be positive");
    require(std::set<HeadId>(target_heads.begin(), target_heads.end()).size() == target_heads.size(), ErrorKind::config,
            "target heads must be distinct");
    require(learning_rate >= 0.0, ErrorKind::config, "learning_rate must be non-negative");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorKind::config, "betas must lie in [0, 1)");
    require(adam_eps > 0.0, ErrorKind::config, "adam_eps must be positive");
    require(weight_decay >= 0.0 && grad_clip >= 0.0, ErrorKind::config, "weight_decay and grad_clip must be non-negative");
    require(min_lr_fraction >= 0.0 && min_lr_fraction <= 1.0, ErrorKind::config, "min_lr_fraction must lie in [0, 1]");
    require(batch_size > 0, ErrorKind::config, "batch_size must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"lambda", c.lambda},
                       {"tau_con", c.tau_con},
                       {"target_heads", c.target_heads},
                       {"similarity_mode", to_string(c.similarity_mode)},
                       {"query_token", to_string(c.query_token)},
                       {"learning_rate", c.learning_rate},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"adam_eps", c.adam_eps},
                       {"weight_decay", c.weight_decay},
                       {"grad_clip", c.grad_clip},
                       {"schedule", to_string(c.schedule)},
                       {"warmup_steps", c.warmup_steps},
                       {"min_lr_fraction", c.min_lr_fraction},
                       {"steps", c.steps},
                       {"batch_size", c.batch_size},
                       {"master_seed", c.master_seed},
                       {"shuffle_passages", c.shuffle_passages},
                       {"clm_full_sequence", c.clm_full_sequence}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    detail::check_keys(j,
                       {"lambda", "tau_con", "target_heads", "similarity_mode", "query_token", "learning_rate", "beta1",
                        "beta2", "adam_eps", "weight_decay", "grad_clip", "schedule", "warmup_steps", "min_lr_fraction",
                        "steps", "batch_size", "master_seed", "shuffle_passages", "clm_full_sequence"},
                       "train config");
    detail::read_optional(j, "lambda", c.lambda);
    detail::read_optional(j, "tau_con", c.tau_con);
    detail::read_optional(j, "target_heads", c.target_heads);
    std::string text;
    if (j.contains("similarity_mode")) {
        detail::read_optional(j, "similarity_mode", text);
        c.similarity_mode = similarity_mode_from_string(text);
    }
    if (j.contains("query_token")) {
        detail::read_optional(j, "query_token", text);
        c.query_token = attribution_token_from_string(text);
    }
    detail::read_optional(j, "learning_rate", c.learning_rate);
    detail::read_optional(j, "beta1", c.beta1);
    detail::read_optional(j, "beta2", c.beta2);
    detail::read_optional(j, "adam_eps", c.adam_eps);
    detail::read_optional(j, "weight_decay", c.weight_decay);
    detail::read_optional(j, "grad_clip", c.grad_clip);
    if (j.contains("schedule")) {
        detail::read_optional(j, "schedule", text);
        c.schedule = schedule_from_string(text);
    }
    detail::read_optional(j, "warmup_steps", c.warmup_steps);
    detail::read_optional(j, "min_lr_fraction", c.min_lr_fraction);
    detail::read_optional(j, "steps", c.steps);
    detail::read_optional(j, "batch_size", c.batch_size);
    detail::read_optional(j, "master_seed", c.master_seed);
    detail::read_optional(j, "shuffle_passages", c.shuffle_passages);
    detail::read_optional(j, "clm_full_sequence", c.clm_full_sequence);
}

double learning_rate_at(const TrainConfig& config, std::size_t step) {
    const double base = config.learning_rate;
    if (config.warmup_steps > 0 && step < config.warmup_steps) {
        return base * static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
    }
    if (config.schedule == LrSchedule::constant || config.steps <= config.warmup_steps + 1) return base;
    const double progress =
        static_cast<double>(step - config.warmup_steps) / static_cast<double>(config.steps - config.warmup_steps - 1);
    const double floor = base * config.min_lr_fraction;
    return floor + (base - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(const std::vector<NamedTensor>& params, const TrainConfig& config) : config_(config) {
    for (const auto& p : params) {
        m_.emplace_back(p.tensor.numel(), 0.0);
        v_.emplace_back(p.tensor.numel(), 0.0);
    }
}

void AdamW::step(std::vector<NamedTensor>& params, double lr) {
    require(params.size() == m_.size(), ErrorKind::usage, "AdamW: parameter list changed");
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i].tensor;
        if (!p.has_grad()) continue;
        const auto g = p.grad();
        auto w = p.mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        const double decay = p.rank() == 2 ? config_.weight_decay : 0.0;
        for (std::size_t k = 0; k < w.size(); ++k) {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            const double mhat = m[k] / c1, vhat = v[k] / c2;
            w[k] -= lr * (mhat / (std::sqrt(vhat) + config_.adam_eps) + decay * w[k]);
        }
    }
}

nlohmann::json to_json_line(const StepMetrics& m) {
    return {{"step", m.loss.step}, {"clm", m.loss.clm}, {"con", m.loss.con}, {"total", m.loss.total}, {"lr", m.lr}};
}

SampleLoss sample_loss(const Model& model, const MdqaSample& sample, const TrainConfig& config) {
    const PromptLayout& layout = sample.layout;
    const std::size_t n = layout.tokens.size();
    require(n >= 2 && layout.prompt_last_token_index + 1 < n, ErrorKind::input, "training sample has no answer tokens");
    const std::span<const TokenId> all(layout.tokens);
    const auto inputs = all.first(n - 1);
    const auto targets = all.subspan(1);
    std::vector<bool> mask(n - 1, false);
    const std::size_t first = config.clm_full_sequence ? 0 : layout.prompt_last_token_index;
    for (std::size_t t = first; t < n - 1; ++t) mask[t] = true;

    ForwardOptions options;
    const bool with_con = contrastive_active(config);
    if (with_con) {
        for (const auto& h : config.target_heads) options.capture_layers.insert(h.layer);
    }
    ForwardResult fwd = model.forward(inputs, options);
    SampleLoss loss;
    loss.clm = cross_entropy_masked(fwd.logits, targets, mask);
    if (with_con) {
        const std::size_t query = attribution_index(layout, config.query_token);
        const ContrastiveBatch batch = build_contrastive_batch(fwd, sample, config.target_heads, model.config(), query);
        loss.con = contrastive_loss(concat_head_features(batch, config.similarity_mode), batch.golden, config.tau_con);
    }
    return loss;
}

Tensor joint_loss(const SampleLoss& loss, double lambda) {
    if (!loss.con.defined() || lambda == 0.0) return loss.clm;
    return add(loss.clm, scale(loss.con, lambda));
}

TrainResult train_run(const Checkpoint& start, const TrainConfig& config, const Corpus& corpus,
                      const std::vector<MdqaSample>& dataset, const TrainHooks& hooks) {
    config.validate();
    require(!dataset.empty(), ErrorKind::usage, "train_run: empty dataset");
    for (const auto& h : config.target_heads) head_index(h, start.config);
    if (contrastive_active(config)) {
        for (const auto& s : dataset) {
            require(s.golden_indices.size() == 1, ErrorKind::input,
                    "contrastive training needs exactly one golden passage per sample");
        }
    }

    Model model = model_from_checkpoint(start);
    std::vector<NamedTensor> params = model.parameters();
    AdamW optimizer(params, config);
    TrainResult result;
    const std::size_t N = dataset.size();
    const double inv_batch = 1.0 / static_cast<double>(config.batch_size);
    std::size_t cached_epoch = static_cast<std::size_t>(-1);
    std::vector<std::size_t> order;
    std::uint64_t draws = 0;

    for (std::size_t step = 0; step < config.steps; ++step) {
        model.zero_grad();
        std::vector<MdqaSample> batch;
        for (std::size_t b = 0; b < config.batch_size; ++b, ++draws) {
            const std::size_t epoch = draws / N;
            if (epoch != cached_epoch) {
                order = epoch_order(N, config.master_seed, epoch);
                cached_epoch = epoch;
            }
            const MdqaSample& base = dataset[order[draws % N]];
            batch.push_back(config.shuffle_passages
                                ? corpus.shuffle_passages(base, derive_seed(config.master_seed, kShuffleStream, draws))
                                : base);
        }

        double clm_sum = 0.0, con_sum = 0.0;
        for (const MdqaSample& sample : batch) {
            SampleLoss loss;
            try {
                loss = sample_loss(model, sample, config);
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::numeric) throw;
                write_diagnostic(hooks.diagnostic_dir, step, batch, config, e.what());
                throw;
            }
            const double clm = loss.clm.item();
            const double con = loss.con.defined() ? loss.con.item() : 0.0;
            if (!std::isfinite(clm) || !std::isfinite(con)) {
                write_diagnostic(hooks.diagnostic_dir, step, batch, config, "non-finite loss");
                fail(ErrorKind::numeric, "non-finite loss at step " + std::to_string(step) +
                                             (hooks.diagnostic_dir.empty() ? std::string()
                                                                           : "; batch dumped to " + hooks.diagnostic_dir.string()));
            }
            clm_sum += clm;
            con_sum += con;
            scale(joint_loss(loss, config.lambda), inv_batch).backward();
        }

        double sq = 0.0;
        for (const auto& p : params) {
            if (!p.tensor.has_grad()) continue;
            for (double g : p.tensor.grad()) sq += g * g;
        }
        const double grad_norm = std::sqrt(sq);
        if (!std::isfinite(grad_norm)) {
            write_diagnostic(hooks.diagnostic_dir, step, batch, config, "non-finite gradient");
            fail(ErrorKind::numeric, "non-finite gradient at step " + std::to_string(step));
        }
        if (config.grad_clip > 0.0 && grad_norm > config.grad_clip) {
            const double factor = config.grad_clip / grad_norm;
            for (auto& p : params) {
                if (!p.tensor.has_grad()) continue;
                for (double& g : p.tensor.mutable_grad()) g *= factor;
            }
        }
        const double lr = learning_rate_at(config, step);
        optimizer.step(params, lr);

        StepMetrics m;
        m.loss = total_loss(clm_sum * inv_batch, con_sum * inv_batch, config.lambda, start.step + step + 1);
        m.lr = lr;
        m.grad_norm = grad_norm;
        if (hooks.on_step) hooks.on_step(m);
        result.metrics.push_back(m);
    }
    const nlohmann::json rng_state = {{"master_seed", config.master_seed}, {"draws", draws}};
    result.checkpoint = make_checkpoint(model, start.step + config.steps, rng_state.dump());
    return result;
}

}  // namespace mudaf
