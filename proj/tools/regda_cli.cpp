// regda: data generation, training, evaluation, plotting and self-tests.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "regda/config.hpp"
#include "regda/plot.hpp"
#include "regda/selftest.hpp"

#ifndef REGDA_BUILD_ID
#define REGDA_BUILD_ID "unknown"
#endif

namespace fs = std::filesystem;
using namespace regda;

namespace {

enum Exit { ok = 0, config_error = 1, numerical_error = 2 };

std::string timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    return buf;
}

std::size_t thread_count() {
    const char* env = std::getenv("REGDA_THREADS");
    if (!env || !*env) return 1;
    try {
        const long n = std::stol(env);
        if (n >= 1) return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("REGDA_THREADS must be a positive integer, got '") + env + "'");
}

void ensure_writable(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
    const auto probe = dir / ".write_probe";
    std::ofstream os(probe);
    if (!os) throw std::runtime_error("output directory is not writable: " + dir.string());
    os.close();
    fs::remove(probe, ec);
}

struct Manifest {
    std::string command;
    json config;
    std::vector<std::uint64_t> seeds;
    std::string started = timestamp();
    std::vector<std::string> artifacts;

    void write(const fs::path& dir) const {
        json j{{"command", command},
               {"config", config},
               {"build", REGDA_BUILD_ID},
               {"threads", thread_count()},
               {"seeds", seeds},
               {"started", started},
               {"finished", timestamp()},
               {"artifacts", artifacts}};
        std::ofstream os(dir / "manifest.json");
        if (!os) throw std::runtime_error("cannot write manifest in " + dir.string());
        os << j.dump(2) << "\n";
    }
};

int cmd_gen_data(const std::string& config_path, const fs::path& out, std::optional<std::uint64_t> seed) {
    auto spec = read_json_file(config_path).get<DatasetSpec>();
    if (seed) spec.seed = *seed;
    spec.validate();
    ensure_writable(out);
    Manifest m{"gen-data", spec, {spec.seed}};
    const auto ds = make_dataset(spec, thread_count());
    save_dataset(ds, out);
    m.artifacts = {"images/", "annotations.csv", "spec.json"};
    m.write(out);
    std::cout << "wrote " << ds.size() << " samples to " << out.string() << "\n";
    return ok;
}

int cmd_train(const std::string& config_path, const fs::path& out, std::optional<std::uint64_t> seed,
              const std::string& resume) {
    auto cfg = load_run_config(config_path);
    if (seed) cfg.train.seed = *seed;
    const fs::path base = fs::path(config_path).parent_path();
    ensure_writable(out);
    Manifest m{"train", cfg, {cfg.train.seed}};

    const auto source = cfg.source.load(base);
    const auto target = cfg.target.load(base);
    const auto target_eval = cfg.target_eval.load(base);
    for (const auto* d : {&source, &target, &target_eval})
        for (const auto& w : d->warnings) std::cerr << "warning: " << w << "\n";

    Trainer trainer(cfg.train, source, target, target_eval);
    std::ios::openmode mode = std::ios::trunc;
    if (!resume.empty()) {
        const auto ckpt = load_checkpoint<Scalar>(resume);
        if (ckpt.meta.at("config") != json(cfg.train))
            throw ConfigError("checkpoint " + resume + " was written with a different training config");
        trainer.restore(ckpt);
        mode = std::ios::app;
        std::cout << "resumed at step " << trainer.global_step() << "\n";
    }
    std::ofstream csv(out / "report.csv", mode);
    if (!csv) throw std::runtime_error("cannot write " + (out / "report.csv").string());
    if (resume.empty()) csv << report_csv_header() << "\n";

    std::size_t last_ckpt = trainer.global_step();
    auto on_record = [&](const TrainRecord& r) {
        csv << report_csv_row(r) << "\n" << std::flush;
        std::printf("%-8s step %6zu  lr %.3g  src %.4f  obj2 %.4f  obj3 %.4f  mae(f) %.4f [%s]  pck(f) %.3f  |y'-y| %.3f\n",
                    r.phase.c_str(), r.step, r.lr, r.losses.source, r.losses.objective2, r.losses.objective3, r.mae_f,
                    kMaeUnit, r.pck_f, r.prediction_difference);
        std::fflush(stdout);
        if (cfg.checkpoint_every && r.step >= last_ckpt + cfg.checkpoint_every) {
            save_checkpoint(out / "checkpoint.bin", trainer.checkpoint());
            last_ckpt = r.step;
        }
    };
    auto report = trainer.run(on_record);
    if (!resume.empty()) {
        // Report JSON covers the whole run, including records written before the resume.
        std::ifstream is(out / "report.csv");
        auto full = parse_report_csv(is, report.method);
        full.adaptation_start = report.adaptation_start;
        report = std::move(full);
    }
    std::ofstream(out / "report.json") << to_json_report(report).dump(2) << "\n";
    save_checkpoint(out / "final.bin", trainer.checkpoint());
    m.artifacts = {"report.csv", "report.json", "final.bin"};
    if (cfg.checkpoint_every) m.artifacts.push_back("checkpoint.bin");
    m.write(out);
    const auto& f = report.final_record();
    std::printf("final target MAE %.4f (%s), PCK@%.2f %.4f\n", f.mae_f, kMaeUnit, cfg.train.pck_alpha, f.pck_f);
    return ok;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, double alpha, const fs::path& out) {
    if (!fs::exists(checkpoint)) throw ConfigError("checkpoint not found: " + checkpoint);
    if (!(alpha > 0)) throw ConfigError("--alpha must be positive");
    const auto ckpt = load_checkpoint<Scalar>(checkpoint);
    const auto tc = ckpt.meta.at("config").get<TrainConfig>();
    auto gen = build_generator<Scalar>(tc.model.generator, 0);
    auto f = build_regressor<Scalar>(tc.model.regressor(), 0, "f");
    auto f_adv = build_regressor<Scalar>(tc.model.regressor(), 0, "f_adv");
    restore_params(gen.params, ckpt);
    restore_params(f.params, ckpt);
    restore_params(f_adv.params, ckpt);

    const auto ds = load_dataset(data);
    for (const auto& w : ds.warnings) std::cerr << "warning: " << w << "\n";
    if (ds.size() == 0) throw ConfigError("dataset " + data + " is empty");
    if (ds.spec.grid != tc.model.grid || ds.spec.image_size != tc.model.generator.image_size)
        throw ConfigError("dataset geometry does not match the checkpoint's model");
    ensure_writable(out);
    Manifest m{"eval", {{"checkpoint", checkpoint}, {"data", data}, {"alpha", alpha}}, {tc.seed}};
    Evaluator ev(gen, f, f_adv, tc.eval_batch);
    const auto p = ev.predict(ds);
    const auto rf = pck(p.f, p.truth, alpha, ds.spec.image_size, ds.spec.grid);
    const auto ra = pck(p.f_adv, p.truth, alpha, ds.spec.image_size, ds.spec.grid);
    const auto d = diagnostics(p.f, p.f_adv, p.truth, alpha, ds.spec.image_size, ds.spec.grid);
    json j{{"samples", rf.samples},
           {"alpha", alpha},
           {"mae_unit", kMaeUnit},
           {"f", {{"mae", rf.mae}, {"pck", rf.pck}, {"pck_per_keypoint", rf.pck_per_keypoint}}},
           {"f_adv", {{"mae", ra.mae}, {"pck", ra.pck}, {"pck_per_keypoint", ra.pck_per_keypoint}}},
           {"accuracy_difference", d.accuracy_difference},
           {"prediction_difference", d.prediction_difference}};
    std::ofstream(out / "metrics.json") << j.dump(2) << "\n";
    m.artifacts = {"metrics.json"};
    m.write(out);
    std::printf("samples %zu  MAE %.4f (%s)  PCK@%.2f %.4f\n", rf.samples, rf.mae, kMaeUnit, alpha, rf.pck);
    return ok;
}

LabeledReport read_report(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open report " + path.string());
    std::string method;
    std::size_t adaptation_start = 0;
    const auto sidecar = path.parent_path() / "report.json";
    if (fs::exists(sidecar)) {
        std::ifstream js(sidecar);
        const auto j = json::parse(js);
        method = j.value("method", "");
        adaptation_start = j.value("adaptation_start", std::size_t{0});
    }
    auto rep = parse_report_csv(is, method);
    if (adaptation_start) rep.adaptation_start = adaptation_start;
    std::string label = path.parent_path().filename().string();
    if (label.empty()) label = path.stem().string();
    return {label, std::move(rep)};
}

int cmd_plot(const std::vector<std::string>& reports, const fs::path& out) {
    std::vector<LabeledReport> loaded;
    for (const auto& r : reports) loaded.push_back(read_report(r));
    ensure_writable(out);
    Manifest m{"plot", {{"reports", reports}}, {}};
    for (const auto& p : write_plots(loaded, out)) m.artifacts.push_back(p.filename().string());
    m.write(out);
    std::ifstream table(out / "comparison.txt");
    std::cout << table.rdbuf();
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"regda: adversarial-regressor domain adaptation for keypoint heatmaps"};
    app.require_subcommand(1);

    std::string config_path, out_dir, resume, checkpoint, data;
    std::optional<std::uint64_t> seed;
    double alpha = kDefaultPckAlpha, log_epsilon = ad::kLogEpsilon;
    std::vector<std::string> reports;

    auto* gen = app.add_subcommand("gen-data", "render a synthetic dataset from a spec file");
    gen->add_option("--config", config_path, "dataset spec (JSON)")->required()->check(CLI::ExistingFile);
    gen->add_option("--out", out_dir, "output directory")->required();
    gen->add_option("--seed", seed, "override the spec's seed");

    auto* train = app.add_subcommand("train", "pretrain on the source domain, then adapt");
    train->add_option("--config", config_path, "run config (JSON)")->required()->check(CLI::ExistingFile);
    train->add_option("--out", out_dir, "output directory")->required();
    train->add_option("--seed", seed, "override train.seed");
    train->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset directory");
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("--data", data, "dataset directory")->required();
    eval->add_option("--alpha", alpha, "PCK threshold as a fraction of the image size");
    eval->add_option("--out", out_dir, "output directory")->required();

    auto* plot = app.add_subcommand("plot", "plot training dynamics and the comparison table");
    plot->add_option("reports", reports, "report.csv files")->required();
    plot->add_option("--out", out_dir, "output directory")->required();

    auto* selftest = app.add_subcommand("selftest", "gradient checks, distribution invariants and KL oracles");
    selftest->add_option("--log-epsilon", log_epsilon, "log clamp used by the checked losses");
    selftest->add_option("--seed", seed, "seed for the random cases");

    auto* config = app.add_subcommand("config", "inspect run configuration");
    bool dump_defaults = false;
    config->add_flag("--dump-defaults", dump_defaults, "print the default run config");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : config_error;
    }

    try {
        if (*gen) return cmd_gen_data(config_path, out_dir, seed);
        if (*train) return cmd_train(config_path, out_dir, seed, resume);
        if (*eval) return cmd_eval(checkpoint, data, alpha, out_dir);
        if (*plot) return cmd_plot(reports, out_dir);
        if (*selftest) {
            const auto summary = run_selftest(log_epsilon, seed.value_or(20240601), std::cout);
            return summary.passed() ? ok : config_error;
        }
        if (*config) {
            if (!dump_defaults) {
                std::cerr << "config: nothing to do (use --dump-defaults)\n";
                return config_error;
            }
            std::cout << json(RunConfig::defaults()).dump(2) << "\n";
            return ok;
        }
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return numerical_error;
    } catch (const std::domain_error& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return numerical_error;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return config_error;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return config_error;
    }
    return ok;
}
