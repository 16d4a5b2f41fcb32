#pragma once

// Training orchestration: source-only pretraining followed by one of the
// adaptation protocols (two opposite minimizations, the disparity-discrepancy
// minimax baseline, or the minimax on the ground-false loss).

#include <array>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "regda/data.hpp"
#include "regda/eval.hpp"
#include "regda/losses.hpp"
#include "regda/model.hpp"
#include "regda/optim.hpp"

namespace regda {

using Scalar = float;

enum class Method { source_only_l2, source_only_kl, dd, minimax_lf, regda };

REGDA_JSON_ENUM(Method, {{Method::source_only_l2, "source_only_l2"},
                                      {Method::source_only_kl, "source_only_kl"},
                                      {Method::dd, "dd"},
                                      {Method::minimax_lf, "minimax_lf"},
                                      {Method::regda, "regda"}})
REGDA_JSON_ENUM(OptimizerKind, {{OptimizerKind::sgd, "sgd"}, {OptimizerKind::adam, "adam"}})

inline bool is_source_only(Method m) { return m == Method::source_only_l2 || m == Method::source_only_kl; }

enum class Schedule { constant, polynomial, milestone };
REGDA_JSON_ENUM(Schedule,
                             {{Schedule::constant, "constant"}, {Schedule::polynomial, "polynomial"}, {Schedule::milestone, "milestone"}})

struct OptimConfig {
    OptimizerKind kind = OptimizerKind::sgd;
    double lr = 0.1;
    double momentum = 0.9;
    bool nesterov = true;
    Schedule schedule = Schedule::polynomial;
    double alpha = 1e-4;  // polynomial: lr * (1 + alpha p)^-beta
    double beta = 0.75;
    std::vector<std::size_t> milestones;  // milestone: lr * gamma^(#reached)
    double gamma = 0.1;
    double head_lr_mult = 10.0;
    double max_grad_norm = 0.0;  // global L2 clip over all parameter groups; 0 disables

    double rate(std::size_t step) const {
        switch (schedule) {
            case Schedule::constant: return lr;
            case Schedule::polynomial: return lr_schedule(step, lr, alpha, beta);
            case Schedule::milestone: return milestone_schedule(step, lr, milestones, gamma);
        }
        return lr;
    }
};

inline void to_json(json& j, const OptimConfig& c) {
    j = json{{"kind", c.kind},   {"lr", c.lr},       {"momentum", c.momentum},     {"nesterov", c.nesterov},
             {"schedule", c.schedule}, {"alpha", c.alpha}, {"beta", c.beta}, {"milestones", c.milestones},
             {"gamma", c.gamma}, {"head_lr_mult", c.head_lr_mult}, {"max_grad_norm", c.max_grad_norm}};
}
inline void from_json(const json& j, OptimConfig& c) {
    StrictReader r(j, "optimizer");
    r.read("kind", c.kind);
    r.read("lr", c.lr);
    r.read("momentum", c.momentum);
    r.read("nesterov", c.nesterov);
    r.read("schedule", c.schedule);
    r.read("alpha", c.alpha);
    r.read("beta", c.beta);
    r.read("milestones", c.milestones);
    r.read("gamma", c.gamma);
    r.read("head_lr_mult", c.head_lr_mult);
    r.read("max_grad_norm", c.max_grad_norm);
    r.finish();
}

struct TrainConfig {
    Method method = Method::regda;
    double eta = 1.0;
    std::size_t pretrain_iterations = 1000;
    std::size_t iterations = 3000;
    std::size_t batch_size = 32;
    OptimConfig pretrain_optim{OptimizerKind::adam, 1e-3, 0.9, true, Schedule::milestone, 0, 0, {}, 0.1, 1.0, 0.0};
    OptimConfig adapt_optim{};
    ModelConfig model{};
    std::uint64_t seed = 0;
    std::size_t eval_every = 100;
    std::size_t eval_batch = 100;
    double sigma = 0.0;  // 0 selects grid/32
    double pck_alpha = kDefaultPckAlpha;
    bool sequential = false;
    bool adversary_source_uses_labels = false;
    std::array<bool, 3> objectives{true, true, true};

    double heatmap_sigma() const { return sigma > 0 ? sigma : default_sigma({model.grid, model.grid}); }

    void validate() const {
        if (eta < 0 || !std::isfinite(eta)) throw ConfigError("train.eta: must be >= 0");
        if (iterations == 0 && !is_source_only(method)) throw ConfigError("train.iterations: must be > 0");
        if (batch_size == 0) throw ConfigError("train.batch_size: must be > 0");
        if (eval_every == 0 || eval_batch == 0) throw ConfigError("train.eval_every/eval_batch: must be > 0");
        model.validate();
    }
};

inline void to_json(json& j, const TrainConfig& c) {
    j = json{{"method", c.method},
             {"eta", c.eta},
             {"pretrain_iterations", c.pretrain_iterations},
             {"iterations", c.iterations},
             {"batch_size", c.batch_size},
             {"pretrain_optim", c.pretrain_optim},
             {"adapt_optim", c.adapt_optim},
             {"model", c.model},
             {"seed", c.seed},
             {"eval_every", c.eval_every},
             {"eval_batch", c.eval_batch},
             {"sigma", c.sigma},
             {"pck_alpha", c.pck_alpha},
             {"sequential", c.sequential},
             {"adversary_source_uses_labels", c.adversary_source_uses_labels},
             {"objectives", c.objectives}};
}
inline void from_json(const json& j, TrainConfig& c) {
    StrictReader r(j, "train");
    r.read("method", c.method);
    r.read("eta", c.eta);
    r.read("pretrain_iterations", c.pretrain_iterations);
    r.read("iterations", c.iterations);
    r.read("batch_size", c.batch_size);
    r.read("pretrain_optim", c.pretrain_optim);
    r.read("adapt_optim", c.adapt_optim);
    r.read("model", c.model);
    r.read("seed", c.seed);
    r.read("eval_every", c.eval_every);
    r.read("eval_batch", c.eval_batch);
    r.read("sigma", c.sigma);
    r.read("pck_alpha", c.pck_alpha);
    r.read("sequential", c.sequential);
    r.read("adversary_source_uses_labels", c.adversary_source_uses_labels);
    r.read("objectives", c.objectives);
    r.finish();
}

struct StepLosses {
    double source = 0;         // L_T (or L2) of f on the source batch
    double adversary_source = 0;  // disparity of f' with f on the source batch
    double objective2 = 0;     // L_F of f' on the target batch
    double objective3 = 0;     // disparity of f' with f on the target batch
    double discrepancy = 0;    // objective3 - adversary_source
};

struct TrainRecord {
    std::string phase;
    std::size_t step = 0;
    double lr = 0;
    StepLosses losses;
    double mae_f = 0, pck_f = 0, mae_f_adv = 0, pck_f_adv = 0;
    double accuracy_difference = 0, prediction_difference = 0;
};

struct TrainReport {
    std::string method;
    std::vector<TrainRecord> records;
    std::size_t adaptation_start = 0;  // global step at which adaptation began

    const TrainRecord& final_record() const {
        if (records.empty()) throw std::logic_error("empty training report");
        return records.back();
    }
    std::vector<TrainRecord> adaptation_records() const {
        std::vector<TrainRecord> out;
        for (const auto& r : records)
            if (r.phase == "adapt") out.push_back(r);
        return out;
    }
};

inline std::string report_csv_header() {
    return "phase,step,lr,source_loss,adversary_source_loss,objective2_loss,objective3_loss,disparity_discrepancy,"
           "target_mae_f,target_pck_f,target_mae_f_adv,target_pck_f_adv,accuracy_difference,prediction_difference";
}

inline std::string report_csv_row(const TrainRecord& r) {
    char buf[640];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                  r.phase.c_str(), r.step, r.lr, r.losses.source, r.losses.adversary_source, r.losses.objective2,
                  r.losses.objective3, r.losses.discrepancy, r.mae_f, r.pck_f, r.mae_f_adv, r.pck_f_adv,
                  r.accuracy_difference, r.prediction_difference);
    return buf;
}

inline json to_json_report(const TrainReport& rep) {
    json rows = json::array();
    for (const auto& r : rep.records)
        rows.push_back({{"phase", r.phase},
                        {"step", r.step},
                        {"lr", r.lr},
                        {"source_loss", r.losses.source},
                        {"adversary_source_loss", r.losses.adversary_source},
                        {"objective2_loss", r.losses.objective2},
                        {"objective3_loss", r.losses.objective3},
                        {"disparity_discrepancy", r.losses.discrepancy},
                        {"target_mae_f", r.mae_f},
                        {"target_pck_f", r.pck_f},
                        {"target_mae_f_adv", r.mae_f_adv},
                        {"target_pck_f_adv", r.pck_f_adv},
                        {"accuracy_difference", r.accuracy_difference},
                        {"prediction_difference", r.prediction_difference}});
    json out{{"method", rep.method}, {"mae_unit", kMaeUnit}, {"adaptation_start", rep.adaptation_start}, {"records", rows}};
    if (!rep.records.empty()) {
        const auto& f = rep.records.back();
        out["final"] = {{"target_mae_f", f.mae_f}, {"target_pck_f", f.pck_f}, {"step", f.step}};
    }
    return out;
}

// Parses a CSV written with report_csv_header()/report_csv_row().
inline TrainReport parse_report_csv(std::istream& is, std::string method = "") {
    TrainReport rep;
    rep.method = std::move(method);
    std::string line;
    if (!std::getline(is, line) || line != report_csv_header()) throw std::runtime_error("report.csv: unexpected header");
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> c;
        while (std::getline(ss, cell, ',')) c.push_back(cell);
        if (c.size() != 14) throw std::runtime_error("report.csv line " + std::to_string(line_no) + ": expected 14 columns");
        TrainRecord r;
        r.phase = c[0];
        r.step = std::stoul(c[1]);
        r.lr = std::stod(c[2]);
        r.losses = {std::stod(c[3]), std::stod(c[4]), std::stod(c[5]), std::stod(c[6]), std::stod(c[7])};
        r.mae_f = std::stod(c[8]);
        r.pck_f = std::stod(c[9]);
        r.mae_f_adv = std::stod(c[10]);
        r.pck_f_adv = std::stod(c[11]);
        r.accuracy_difference = std::stod(c[12]);
        r.prediction_difference = std::stod(c[13]);
        if (r.phase == "adapt" && rep.adaptation_start == 0 && !rep.records.empty() && rep.records.back().phase != "adapt")
            rep.adaptation_start = r.step;
        rep.records.push_back(std::move(r));
    }
    return rep;
}

// Predictions of f and f' for every sample of a dataset.
struct Predictions {
    std::vector<KeypointSet> f, f_adv, truth;
};

// Runs psi, f and f' in inference mode over a dataset.
class Evaluator {
public:
    Evaluator(const GeneratorParams<Scalar>& gen, const RegressorParams<Scalar>& f, const RegressorParams<Scalar>& f_adv,
              std::size_t batch)
        : gen_(&gen), f_(&f), f_adv_(&f_adv), batch_(batch) {}

    Predictions predict(const Dataset& ds) {
        Predictions out;
        std::vector<std::size_t> idx;
        for (std::size_t start = 0; start < ds.size(); start += batch_) {
            const std::size_t n = std::min(batch_, ds.size() - start);
            idx.resize(n);
            std::iota(idx.begin(), idx.end(), start);
            auto b = gather(ds, idx);
            auto& net = graph_for(n);
            net.graph->set_input("x", b.images);
            net.graph->evaluate();
            auto pf = decode_batch(net.f.value());
            auto pa = decode_batch(net.f_adv.value());
            out.f.insert(out.f.end(), pf.begin(), pf.end());
            out.f_adv.insert(out.f_adv.end(), pa.begin(), pa.end());
            out.truth.insert(out.truth.end(), b.keypoints.begin(), b.keypoints.end());
        }
        return out;
    }

private:
    struct Net {
        std::unique_ptr<ad::Graph<Scalar>> graph;
        Var<Scalar> f, f_adv;
    };

    Net& graph_for(std::size_t n) {
        auto it = nets_.find(n);
        if (it != nets_.end()) return it->second;
        Net net;
        net.graph = std::make_unique<ad::Graph<Scalar>>();
        auto& g = *net.graph;
        const auto& gc = gen_->config;
        auto x = g.input("x", {n, gc.in_channels, gc.image_size, gc.image_size});
        auto feats = apply_generator(gc, regda::bind(g, gen_->params), x);
        net.f = apply_regressor(f_->config, regda::bind(g, f_->params), feats);
        net.f_adv = apply_regressor(f_adv_->config, regda::bind(g, f_adv_->params), feats);
        return nets_.emplace(n, std::move(net)).first->second;
    }

    const GeneratorParams<Scalar>* gen_;
    const RegressorParams<Scalar>* f_;
    const RegressorParams<Scalar>* f_adv_;
    std::size_t batch_;
    std::map<std::size_t, Net> nets_;
};

// Owns the models, optimizers and data iterators of one run.
class Trainer {
public:
    Trainer(TrainConfig config, const Dataset& source, const Dataset& target, const Dataset& target_eval)
        : cfg_(std::move(config)),
          source_(&source),
          target_(&target),
          eval_(&target_eval),
          gen_(build_generator<Scalar>(cfg_.model.generator, derive_seed(cfg_.seed, 101))),
          f_(build_regressor<Scalar>(cfg_.model.regressor(), derive_seed(cfg_.seed, 102), "f")),
          f_adv_(build_regressor<Scalar>(cfg_.model.regressor(), derive_seed(cfg_.seed, 103), "f_adv")),
          source_iter_(source, cfg_.batch_size, derive_seed(cfg_.seed, 201)),
          target_iter_(target, cfg_.batch_size, derive_seed(cfg_.seed, 202)),
          target_spec_{Grid{cfg_.model.grid, cfg_.model.grid}, cfg_.heatmap_sigma(), std::nullopt} {
        cfg_.validate();
        check_dataset(source, "source");
        check_dataset(target, "target");
        check_dataset(target_eval, "target evaluation");
        if (cfg_.model.keypoints == 1) target_spec_.area = target.spec.area();
        pretrain_opt_ = make_optimizer(pretrain_optim_config());
        adapt_opt_ = make_optimizer(cfg_.adapt_optim);
    }

    const TrainConfig& config() const { return cfg_; }
    GeneratorParams<Scalar>& generator() { return gen_; }
    RegressorParams<Scalar>& regressor() { return f_; }
    RegressorParams<Scalar>& adversary() { return f_adv_; }
    std::size_t pretrain_steps_done() const { return pretrain_done_; }
    std::size_t adapt_steps_done() const { return adapt_done_; }
    std::size_t global_step() const { return pretrain_done_ + adapt_done_; }
    double last_grad_norm() const { return last_grad_norm_; }

    // One source-only step on psi, f (and f' on detached features).
    StepLosses pretrain_step() {
        auto& pg = pretrain_graph();
        auto src = source_iter_.next();
        bind_source(pg, src);
        const double lr = pretrain_optim_config().rate(pretrain_done_);
        pg.graph->evaluate();
        auto losses = read_losses(pg);
        check_finite_losses(losses, src.ids, {});
        pg.graph->backward(pg.total);
        pretrain_opt_->step(clipped(collect_grads(pg), pretrain_optim_config().max_grad_norm), lr);
        ++pretrain_done_;
        return losses;
    }

    // One adaptation step of the configured method.
    StepLosses adapt_step() {
        if (is_source_only(cfg_.method)) throw std::logic_error("adapt_step: source-only methods have no adaptation phase");
        auto& ag = adapt_graph();
        auto src = source_iter_.next();
        auto tgt = target_iter_.next_unlabeled();
        bind_source(ag, src);
        ag.graph->set_input("x_t", tgt.images());
        const double lr = cfg_.adapt_optim.rate(adapt_done_);
        StepLosses losses;
        if (cfg_.sequential && cfg_.method == Method::regda) {
            for (std::size_t i = 0; i < ag.objective_roots.size(); ++i) {
                ag.graph->evaluate();
                if (i == 0) {
                    losses = read_losses(ag);
                    check_finite_losses(losses, src.ids, tgt.ids());
                }
                ag.graph->backward(ag.objective_roots[i]);
                adapt_opt_->step(clipped(collect_grads(ag), cfg_.adapt_optim.max_grad_norm), lr);
            }
        } else {
            ag.graph->evaluate();
            losses = read_losses(ag);
            check_finite_losses(losses, src.ids, tgt.ids());
            ag.graph->backward(ag.total);
            adapt_opt_->step(clipped(collect_grads(ag), cfg_.adapt_optim.max_grad_norm), lr);
        }
        ++adapt_done_;
        return losses;
    }

    TrainRecord evaluate(const std::string& phase, double lr, const StepLosses& losses) {
        Evaluator ev(gen_, f_, f_adv_, cfg_.eval_batch);
        const auto p = ev.predict(*eval_);
        const auto& spec = eval_->spec;
        TrainRecord r;
        r.phase = phase;
        r.step = global_step();
        r.lr = lr;
        r.losses = losses;
        const auto mf = pck(p.f, p.truth, cfg_.pck_alpha, spec.image_size, spec.grid);
        const auto ma = pck(p.f_adv, p.truth, cfg_.pck_alpha, spec.image_size, spec.grid);
        const auto d = diagnostics(p.f, p.f_adv, p.truth, cfg_.pck_alpha, spec.image_size, spec.grid);
        r.mae_f = mf.mae;
        r.pck_f = mf.pck;
        r.mae_f_adv = ma.mae;
        r.pck_f_adv = ma.pck;
        r.accuracy_difference = d.accuracy_difference;
        r.prediction_difference = d.prediction_difference;
        return r;
    }

    // Runs (or resumes) both phases; `on_record` sees every record as it is produced.
    TrainReport run(const std::function<void(const TrainRecord&)>& on_record = {}) {
        TrainReport rep;
        rep.method = json(cfg_.method).get<std::string>();
        rep.adaptation_start = cfg_.pretrain_iterations;
        auto emit = [&](TrainRecord r) {
            if (on_record) on_record(r);
            rep.records.push_back(std::move(r));
        };
        LossAverager avg;
        while (pretrain_done_ < cfg_.pretrain_iterations) {
            avg.add(pretrain_step());
            if (pretrain_done_ % cfg_.eval_every == 0 && pretrain_done_ < cfg_.pretrain_iterations)
                emit(evaluate("pretrain", pretrain_optim_config().rate(pretrain_done_ - 1), avg.take()));
        }
        if (is_source_only(cfg_.method)) {
            emit(evaluate("final", pretrain_optim_config().rate(cfg_.pretrain_iterations ? cfg_.pretrain_iterations - 1 : 0),
                          avg.take()));
            return rep;
        }
        if (adapt_done_ == 0) emit(evaluate("adapt", cfg_.adapt_optim.rate(0), avg.take()));
        while (adapt_done_ < cfg_.iterations) {
            avg.add(adapt_step());
            if (adapt_done_ % cfg_.eval_every == 0 || adapt_done_ == cfg_.iterations)
                emit(evaluate("adapt", cfg_.adapt_optim.rate(adapt_done_ - 1), avg.take()));
        }
        return rep;
    }

    Checkpoint<Scalar> checkpoint() const {
        Checkpoint<Scalar> c;
        c.meta = {{"format", "regda-checkpoint"},
                  {"config", cfg_},
                  {"pretrain_steps", pretrain_done_},
                  {"adapt_steps", adapt_done_},
                  {"generator", gen_.config},
                  {"regressor", f_.config}};
        for (const auto* list : {&gen_.params, &f_.params, &f_adv_.params})
            for (const auto& p : *list) c.arrays.push_back(p);
        save_optimizer(c, "pretrain", *pretrain_opt_);
        save_optimizer(c, "adapt", *adapt_opt_);
        return c;
    }

    void restore(const Checkpoint<Scalar>& c) {
        restore_params(gen_.params, c);
        restore_params(f_.params, c);
        restore_params(f_adv_.params, c);
        pretrain_done_ = c.meta.at("pretrain_steps").get<std::size_t>();
        adapt_done_ = c.meta.at("adapt_steps").get<std::size_t>();
        load_optimizer(c, "pretrain", *pretrain_opt_);
        load_optimizer(c, "adapt", *adapt_opt_);
        const std::size_t consumed = pretrain_done_ + adapt_done_;
        source_iter_.seek(consumed / source_iter_.batches_per_epoch(), consumed % source_iter_.batches_per_epoch());
        target_iter_.seek(adapt_done_ / target_iter_.batches_per_epoch(), adapt_done_ % target_iter_.batches_per_epoch());
    }

private:
    struct PhaseGraph {
        std::unique_ptr<ad::Graph<Scalar>> graph;
        std::array<BoundParams<Scalar>, 3> params;  // psi, f, f'
        Var<Scalar> total;
        std::vector<Var<Scalar>> objective_roots;
        Var<Scalar> source, adversary_source, objective2, objective3;
        bool needs_heatmap = false;
    };

    struct LossAverager {
        StepLosses sum;
        std::size_t n = 0;
        void add(const StepLosses& l) {
            sum.source += l.source;
            sum.adversary_source += l.adversary_source;
            sum.objective2 += l.objective2;
            sum.objective3 += l.objective3;
            sum.discrepancy += l.discrepancy;
            ++n;
        }
        StepLosses take() {
            StepLosses out;
            if (n) {
                const double k = static_cast<double>(n);
                out = {sum.source / k, sum.adversary_source / k, sum.objective2 / k, sum.objective3 / k, sum.discrepancy / k};
            }
            *this = {};
            return out;
        }
    };

    OptimConfig pretrain_optim_config() const {
        auto c = cfg_.pretrain_optim;
        if (cfg_.method == Method::source_only_l2) c.kind = OptimizerKind::adam;
        return c;
    }

    std::unique_ptr<Optimizer<Scalar>> make_optimizer(const OptimConfig& oc) {
        auto opt = std::make_unique<Optimizer<Scalar>>(oc.kind, oc.momentum, oc.nesterov);
        opt->add_group(pointers(gen_.params), 1.0);
        opt->add_group(pointers(f_.params), oc.head_lr_mult);
        opt->add_group(pointers(f_adv_.params), oc.head_lr_mult);
        return opt;
    }

    static std::vector<Tensor<Scalar>*> pointers(ParamList<Scalar>& list) {
        std::vector<Tensor<Scalar>*> out;
        for (auto& p : list) out.push_back(&p.value);
        return out;
    }

    static void save_optimizer(Checkpoint<Scalar>& c, const std::string& tag, Optimizer<Scalar>& opt) {
        auto& sgd = opt.sgd_states();
        auto& adam = opt.adam_states();
        c.meta["optimizer_steps_" + tag] = json::array();
        for (std::size_t g = 0; g < opt.groups().size(); ++g) {
            c.meta["optimizer_steps_" + tag].push_back({sgd[g].steps, adam[g].steps});
            for (std::size_t i = 0; i < sgd[g].velocity.size(); ++i)
                c.arrays.push_back({tag + ".sgd." + std::to_string(g) + "." + std::to_string(i), sgd[g].velocity[i]});
            for (std::size_t i = 0; i < adam[g].first.size(); ++i) {
                c.arrays.push_back({tag + ".adam_m." + std::to_string(g) + "." + std::to_string(i), adam[g].first[i]});
                c.arrays.push_back({tag + ".adam_v." + std::to_string(g) + "." + std::to_string(i), adam[g].second[i]});
            }
        }
    }

    static void load_optimizer(const Checkpoint<Scalar>& c, const std::string& tag, Optimizer<Scalar>& opt) {
        auto& sgd = opt.sgd_states();
        auto& adam = opt.adam_states();
        const auto& steps = c.meta.at("optimizer_steps_" + tag);
        for (std::size_t g = 0; g < opt.groups().size(); ++g) {
            sgd[g] = {};
            adam[g] = {};
            sgd[g].steps = steps.at(g).at(0).get<std::size_t>();
            adam[g].steps = steps.at(g).at(1).get<std::size_t>();
            for (std::size_t i = 0;; ++i) {
                const auto name = tag + ".sgd." + std::to_string(g) + "." + std::to_string(i);
                if (!c.has(name)) break;
                sgd[g].velocity.push_back(c.array(name));
            }
            for (std::size_t i = 0;; ++i) {
                const auto m = tag + ".adam_m." + std::to_string(g) + "." + std::to_string(i);
                if (!c.has(m)) break;
                adam[g].first.push_back(c.array(m));
                adam[g].second.push_back(c.array(tag + ".adam_v." + std::to_string(g) + "." + std::to_string(i)));
            }
        }
    }

    void check_dataset(const Dataset& ds, const char* role) const {
        if (ds.spec.grid != cfg_.model.grid)
            throw ConfigError(std::string(role) + " dataset grid " + std::to_string(ds.spec.grid) + " differs from model grid " +
                              std::to_string(cfg_.model.grid));
        if (ds.spec.image_size != cfg_.model.generator.image_size)
            throw ConfigError(std::string(role) + " dataset image size " + std::to_string(ds.spec.image_size) +
                              " differs from model input " + std::to_string(cfg_.model.generator.image_size));
        if (ds.spec.keypoints != cfg_.model.keypoints)
            throw ConfigError(std::string(role) + " dataset has " + std::to_string(ds.spec.keypoints) +
                              " keypoints, model expects " + std::to_string(cfg_.model.keypoints));
        if (ds.size() == 0) throw ConfigError(std::string(role) + " dataset is empty");
    }

    Shape image_shape() const {
        const auto& g = cfg_.model.generator;
        return {cfg_.batch_size, g.in_channels, g.image_size, g.image_size};
    }
    Shape map_shape() const { return {cfg_.batch_size, cfg_.model.keypoints, cfg_.model.grid, cfg_.model.grid}; }

    void bind_params(PhaseGraph& pg) {
        auto& g = *pg.graph;
        pg.params[0] = regda::bind(g, gen_.params);
        pg.params[1] = regda::bind(g, f_.params);
        pg.params[2] = regda::bind(g, f_adv_.params);
    }

    Var<Scalar> psi(PhaseGraph& pg, const Var<Scalar>& x) { return apply_generator(gen_.config, pg.params[0], x); }
    Var<Scalar> head(const RegressorParams<Scalar>& r, const BoundParams<Scalar>& p, const Var<Scalar>& feats) {
        return apply_regressor(r.config, p, feats);
    }

    // Target for f' on the source batch: J(f(x_s)) by default, or the labels.
    Var<Scalar> adversary_source_target(const Var<Scalar>& zs, const Var<Scalar>& qs) {
        return cfg_.adversary_source_uses_labels ? qs : truth_from_prediction(zs, target_spec_.sigma);
    }

    PhaseGraph& pretrain_graph() {
        if (pretrain_) return *pretrain_;
        auto pg = std::make_unique<PhaseGraph>();
        pg->graph = std::make_unique<ad::Graph<Scalar>>();
        pg->graph->set_finite_check(true);
        auto& g = *pg->graph;
        bind_params(*pg);
        auto xs = g.input("x_s", image_shape());
        auto qs = g.input("q_s", map_shape());
        auto fs = psi(*pg, xs);
        auto zs = head(f_, pg->params[1], fs);
        if (cfg_.method == Method::source_only_l2) {
            pg->needs_heatmap = true;
            auto hs = g.input("h_s", map_shape());
            pg->source = loss_mse(zs, hs).value;
        } else {
            pg->source = loss_true(spatial_softmax(zs), qs).value;
        }
        auto zs_adv = head(f_adv_, pg->params[2], ad::detach(fs));
        pg->adversary_source = loss_true(spatial_softmax(zs_adv), adversary_source_target(zs, qs)).value;
        pg->total = ad::add(pg->source, pg->adversary_source);
        pretrain_ = std::move(pg);
        return *pretrain_;
    }

    PhaseGraph& adapt_graph() {
        if (adapt_) return *adapt_;
        auto pg = std::make_unique<PhaseGraph>();
        pg->graph = std::make_unique<ad::Graph<Scalar>>();
        pg->graph->set_finite_check(true);
        auto& g = *pg->graph;
        bind_params(*pg);
        const auto eta = static_cast<Scalar>(cfg_.eta);
        const double sigma = target_spec_.sigma;
        auto xs = g.input("x_s", image_shape());
        auto qs = g.input("q_s", map_shape());
        auto xt = g.input("x_t", image_shape());
        auto fs = psi(*pg, xs);
        auto ft = psi(*pg, xt);
        auto zs = head(f_, pg->params[1], fs);
        auto zt = head(f_, pg->params[1], ft);
        pg->source = loss_true(spatial_softmax(zs), qs).value;
        const auto truth_t = truth_from_prediction(zt, sigma);
        const auto& on = cfg_.objectives;

        switch (cfg_.method) {
            case Method::regda: {
                // Objective 1: psi, f on labels; f' follows f on the source domain.
                auto zs_adv = head(f_adv_, pg->params[2], fs);
                pg->adversary_source = loss_true(spatial_softmax(zs_adv), adversary_source_target(zs, qs)).value;
                auto obj1 = ad::add(pg->source, ad::scale(pg->adversary_source, eta));
                // Objective 2: only f' moves, towards the ground-false map of f.
                auto zt_adv = head(f_adv_, pg->params[2], ad::detach(ft));
                pg->objective2 = loss_false(spatial_softmax(zt_adv), zt, target_spec_).value;
                auto obj2 = ad::scale(pg->objective2, eta);
                // Objective 3: only psi moves, pulling frozen f' back onto f.
                auto zt_frozen = head(f_adv_, pg->params[2].frozen(), ft);
                pg->objective3 = loss_true(spatial_softmax(zt_frozen), truth_t).value;
                auto obj3 = ad::scale(pg->objective3, eta);
                pg->objective_roots = {obj1, obj2, obj3};
                std::vector<Var<Scalar>> active;
                for (std::size_t i = 0; i < 3; ++i)
                    if (on[i]) active.push_back(pg->objective_roots[i]);
                pg->total = sum_all(g, active);
                break;
            }
            case Method::dd: {
                // f' sees the features through a gradient reversal: it minimizes
                // eta * (disp_s - disp_t) while psi minimizes eta * (disp_t - disp_s).
                auto zs_adv = head(f_adv_, pg->params[2], ad::reverse_grad(fs, Scalar{1}));
                auto zt_adv = head(f_adv_, pg->params[2], ad::reverse_grad(ft, Scalar{1}));
                pg->adversary_source = loss_true(spatial_softmax(zs_adv), adversary_source_target(zs, qs)).value;
                pg->objective3 = loss_true(spatial_softmax(zt_adv), truth_t).value;
                auto adv = ad::scale(ad::sub(pg->adversary_source, pg->objective3), eta);
                pg->total = ad::add(pg->source, adv);
                break;
            }
            case Method::minimax_lf: {
                auto zs_adv = head(f_adv_, pg->params[2], fs);
                pg->adversary_source = loss_true(spatial_softmax(zs_adv), adversary_source_target(zs, qs)).value;
                auto obj1 = ad::add(pg->source, ad::scale(pg->adversary_source, eta));
                // f' minimizes L_F; psi receives the reversed gradient and maximizes it.
                auto zt_adv = head(f_adv_, pg->params[2], ad::reverse_grad(ft, Scalar{1}));
                auto pt_adv = spatial_softmax(zt_adv);
                pg->objective2 = loss_false(pt_adv, zt, target_spec_).value;
                pg->objective3 = loss_true(pt_adv, truth_t).value;
                pg->total = ad::add(obj1, ad::scale(pg->objective2, eta));
                break;
            }
            default: throw std::logic_error("adapt_graph: source-only method");
        }
        adapt_ = std::move(pg);
        return *adapt_;
    }

    static Var<Scalar> sum_all(ad::Graph<Scalar>& g, const std::vector<Var<Scalar>>& terms) {
        if (terms.empty()) return g.constant(Tensor<Scalar>::scalar(0), "no objectives");
        auto acc = terms.front();
        for (std::size_t i = 1; i < terms.size(); ++i) acc = ad::add(acc, terms[i]);
        return acc;
    }

    void bind_source(PhaseGraph& pg, const LabeledBatch& b) {
        const Grid grid{cfg_.model.grid, cfg_.model.grid};
        pg.graph->set_input("x_s", b.images);
        pg.graph->set_input("q_s", truth_targets<Scalar>(b.keypoints, grid, target_spec_.sigma));
        if (pg.needs_heatmap) pg.graph->set_input("h_s", heatmap_targets<Scalar>(b.keypoints, grid, target_spec_.sigma));
    }

    static double scalar_of(const Var<Scalar>& v) { return v.valid() ? static_cast<double>(v.value()[0]) : 0.0; }

    StepLosses read_losses(const PhaseGraph& pg) const {
        StepLosses l;
        l.source = scalar_of(pg.source);
        l.adversary_source = scalar_of(pg.adversary_source);
        l.objective2 = scalar_of(pg.objective2);
        l.objective3 = scalar_of(pg.objective3);
        l.discrepancy = pg.objective3.valid() ? l.objective3 - l.adversary_source : 0.0;
        return l;
    }

    void check_finite_losses(const StepLosses& l, const std::vector<std::size_t>& src_ids,
                             const std::vector<std::size_t>& tgt_ids) const {
        if (std::isfinite(l.source) && std::isfinite(l.adversary_source) && std::isfinite(l.objective2) &&
            std::isfinite(l.objective3))
            return;
        std::ostringstream os;
        os << "non-finite loss at step " << global_step() << "; source batch ids:";
        for (auto i : src_ids) os << ' ' << i;
        os << "; target batch ids:";
        for (auto i : tgt_ids) os << ' ' << i;
        throw NumericalError(os.str());
    }

    // Rescales all gradients jointly so their global L2 norm is at most max_norm.
    std::vector<std::vector<Tensor<Scalar>>> clipped(std::vector<std::vector<Tensor<Scalar>>> grads, double max_norm) {
        double sq = 0.0;
        for (const auto& group : grads)
            for (const auto& t : group)
                for (auto v : t.vec()) sq += static_cast<double>(v) * static_cast<double>(v);
        last_grad_norm_ = std::sqrt(sq);
        if (max_norm > 0 && last_grad_norm_ > max_norm) {
            const auto f = static_cast<Scalar>(max_norm / last_grad_norm_);
            for (auto& group : grads)
                for (auto& t : group)
                    for (auto& v : t.vec()) v *= f;
        }
        return grads;
    }

    std::vector<std::vector<Tensor<Scalar>>> collect_grads(const PhaseGraph& pg) const {
        std::vector<std::vector<Tensor<Scalar>>> out(3);
        for (std::size_t m = 0; m < 3; ++m)
            for (const auto& v : pg.params[m].vars) out[m].push_back(pg.graph->grad(v));
        return out;
    }

    TrainConfig cfg_;
    const Dataset* source_;
    const Dataset* target_;
    const Dataset* eval_;
    GeneratorParams<Scalar> gen_;
    RegressorParams<Scalar> f_;
    RegressorParams<Scalar> f_adv_;
    BatchIterator source_iter_;
    BatchIterator target_iter_;
    TargetSpec target_spec_;
    std::unique_ptr<Optimizer<Scalar>> pretrain_opt_;
    std::unique_ptr<Optimizer<Scalar>> adapt_opt_;
    std::unique_ptr<PhaseGraph> pretrain_;
    std::unique_ptr<PhaseGraph> adapt_;
    std::size_t pretrain_done_ = 0;
    std::size_t adapt_done_ = 0;
    double last_grad_norm_ = 0.0;
};

// Builds a trainer over in-memory datasets and runs it to completion.
inline TrainReport run_training(const TrainConfig& config, const Dataset& source, const Dataset& target,
                                const Dataset& target_eval, const std::function<void(const TrainRecord&)>& on_record = {}) {
    Trainer t(config, source, target, target_eval);
    return t.run(on_record);
}

}  // namespace regda
