// protocase: prototype-based case reasoning on synthetic margin data.
//
// Subcommands: gen-data, train, eval, explain, prune, gradcheck. Exit codes:
// 0 success, 2 configuration error, 3 data error, 4 numeric error. Flags
// override --config file values, which override built-in defaults; every run
// writes its fully resolved configuration next to its outputs.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "protocase/checkpoint.hpp"
#include "protocase/common.hpp"
#include "protocase/dataset.hpp"
#include "protocase/eval.hpp"
#include "protocase/explain.hpp"
#include "protocase/gradcheck.hpp"
#include "protocase/losses.hpp"
#include "protocase/network.hpp"
#include "protocase/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

// Flat key=value config file; explicitly set flags keep precedence over file
// values, file values over built-in defaults.
void apply_config_file(CLI::App* cmd, const std::string& path) {
    std::ifstream f(path);
    if (!f) throw protocase::ConfigError("cannot read config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        while (!line.empty() && (line.back() == ' ' || line.back() == '\r' || line.back() == '\t'))
            line.pop_back();
        std::size_t start = line.find_first_not_of(" \t");
        if (start == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw protocase::ConfigError("config " + path + ":" + std::to_string(lineno) +
                                         ": expected key=value");
        std::string key = line.substr(start, eq - start);
        std::string value = line.substr(eq + 1);
        auto trim = [](std::string& s) {
            while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.erase(s.begin());
            while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.pop_back();
            if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') ||
                                  (s.front() == '\'' && s.back() == '\'')))
                s = s.substr(1, s.size() - 2);
        };
        trim(key);
        trim(value);
        for (auto& ch : key)
            if (ch == '_') ch = '-';
        auto* opt = cmd->get_option_no_throw("--" + key);
        if (opt == nullptr)
            throw protocase::ConfigError("config " + path + ":" + std::to_string(lineno) +
                                         ": unknown key '" + key + "'");
        if (opt->count() > 0) continue;  // explicit flag wins
        opt->add_result(value);
        opt->run_callback();
    }
}

void write_resolved_config(CLI::App* cmd, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::ofstream f(std::filesystem::path(out_dir) / "run_config.txt");
    if (!f) throw protocase::DataError("cannot write run_config.txt in " + out_dir);
    f << "# resolved configuration: " << cmd->get_name() << "\n";
    f << cmd->config_to_str(/*default_also=*/true, /*write_description=*/false);
}

struct GenArgs {
    protocase::GeneratorConfig cfg;
    std::string out;
};

struct TrainArgs {
    protocase::TrainOptions opts;
    std::string data_dir;
};

struct EvalArgs {
    std::string model;
    std::string data_dir;
    std::string split = "test";
    std::string out = "eval_out";
    std::string attention_maps;
    double tau = 0.95;
    int bootstrap_resamples = 5000;
    std::uint64_t bootstrap_seed = 0;
};

struct ExplainArgs {
    std::string model;
    std::string data_dir;
    std::string out;
    std::vector<std::string> cases;
    std::string split = "test";
    int limit = 5;
    int top_evidence = 3;
    bool prototypes = false;
    double tau = 0.95;
};

struct PruneArgs {
    std::string model;
    std::string out;
    bool no_duplicate_source = false;
    bool no_wrong_sign = false;
};

struct GradcheckArgs {
    std::uint64_t seed = 7;
    double eps = 1e-5;
    double tolerance = 1e-4;
    std::string out;
};

int run_gen_data(const GenArgs& a, CLI::App* cmd) {
    const auto ds = protocase::generate(a.cfg);
    protocase::save(ds, a.out);
    write_resolved_config(cmd, a.out);
    std::printf("wrote %zu samples to %s\n", ds.samples.size(), a.out.c_str());
    return kExitOk;
}

int run_train(TrainArgs& a, CLI::App* cmd) {
    const auto ds = protocase::load(a.data_dir);
    a.opts.model.input_h = ds.config.image_h;
    a.opts.model.input_w = ds.config.image_w;
    write_resolved_config(cmd, a.opts.out_dir);
    auto [state, report] = protocase::train(a.opts, ds);

    std::ofstream f(std::filesystem::path(a.opts.out_dir) / "report.txt");
    f << "cycles_run " << report.cycles_run << "\n";
    f << "converged " << (report.converged ? 1 : 0) << "\n";
    f << "final_cycle_loss " << report.final_cycle_loss << "\n";
    f << "stage_b_loss " << report.stage_b_loss << "\n";
    f << "elapsed_seconds " << report.elapsed_seconds << "\n";
    std::printf("trained %d cycles (%s) in %.1f s; checkpoint: %s/final.ckpt\n", report.cycles_run,
                report.converged ? "converged" : "cycle limit", report.elapsed_seconds,
                a.opts.out_dir.c_str());
    return kExitOk;
}

int run_eval(const EvalArgs& a, CLI::App* cmd) {
    if (a.model.empty() && a.attention_maps.empty())
        throw protocase::ConfigError("eval: provide --model and/or --attention-maps");
    const auto ds = protocase::load(a.data_dir);
    protocase::EvalOptions opts;
    opts.split = protocase::split_from_name(a.split);
    opts.tau = a.tau;
    opts.bootstrap_resamples = a.bootstrap_resamples;
    opts.bootstrap_seed = a.bootstrap_seed;

    std::vector<protocase::MetricRow> rows;
    if (!a.model.empty()) {
        const auto ck = protocase::load_checkpoint(a.model);
        rows = protocase::evaluate(ck.state, ds, opts).rows;
    }
    if (!a.attention_maps.empty()) {
        const auto ext = protocase::evaluate_external_maps(ds, opts.split, a.attention_maps, a.tau);
        rows.insert(rows.end(), ext.begin(), ext.end());
    }
    std::filesystem::create_directories(a.out);
    protocase::write_metric_report(rows, (std::filesystem::path(a.out) / "metrics.txt").string());
    write_resolved_config(cmd, a.out);
    for (const auto& r : rows) std::printf("%s\n", protocase::metric_line(r).c_str());
    return kExitOk;
}

int run_explain(const ExplainArgs& a, CLI::App* cmd) {
    const auto ck = protocase::load_checkpoint(a.model);
    const auto ds = protocase::load(a.data_dir);
    write_resolved_config(cmd, a.out);

    std::vector<const protocase::Sample*> chosen;
    if (!a.cases.empty()) {
        for (const auto& id : a.cases) {
            const protocase::Sample* found = nullptr;
            for (const auto& s : ds.samples)
                if (s.id == id) found = &s;
            if (!found) throw protocase::DataError("explain: case id not in dataset: " + id);
            chosen.push_back(found);
        }
    } else {
        for (int i : ds.indices_of(protocase::split_from_name(a.split))) {
            if (static_cast<int>(chosen.size()) >= a.limit) break;
            chosen.push_back(&ds.samples[i]);
        }
    }
    for (const auto* s : chosen) {
        const auto dir = protocase::write_case_report(ck.state, *s, a.out, a.top_evidence);
        std::printf("wrote %s\n", dir.string().c_str());
    }
    if (a.prototypes) {
        namespace fs = std::filesystem;
        const fs::path pdir = fs::path(a.out) / "prototypes";
        fs::create_directories(pdir);
        for (int j = 0; j < ck.state.num_prototypes(); ++j) {
            if (!ck.state.prototypes[j].active || !ck.state.prototypes[j].has_source) continue;
            const auto v = protocase::visualize_prototype(ck.state, j, ds, a.tau);
            protocase::png::write_file(
                (pdir / ("proto_" + std::to_string(j) + "_overlay.png")).string(),
                protocase::png::encode_gray8(v.self_overlay.h, v.self_overlay.w,
                                             protocase::to_bytes(v.self_overlay)));
            protocase::png::write_file(
                (pdir / ("proto_" + std::to_string(j) + "_crop.png")).string(),
                protocase::png::encode_gray8(v.crop.h, v.crop.w, protocase::to_bytes(v.crop)));
        }
        std::printf("wrote %s\n", pdir.string().c_str());
    }
    return kExitOk;
}

int run_prune(const PruneArgs& a, CLI::App* cmd) {
    auto ck = protocase::load_checkpoint(a.model);
    protocase::PruneCriteria crit;
    crit.duplicate_source = !a.no_duplicate_source;
    crit.wrong_sign = !a.no_wrong_sign;
    const auto report = protocase::prune(ck.state, crit);

    namespace fs = std::filesystem;
    const fs::path out_path(a.out);
    const std::string out_dir =
        out_path.has_parent_path() ? out_path.parent_path().string() : std::string(".");
    fs::create_directories(out_dir);
    protocase::save_checkpoint(ck, a.out);
    write_resolved_config(cmd, out_dir);

    std::ofstream f(fs::path(out_dir) / "prune_report.txt");
    f << "pruned " << report.removed.size() << "\n";
    for (const auto& e : report.removed) f << "prototype " << e.prototype << " " << e.reason << "\n";
    std::printf("pruned %zu prototypes; wrote %s\n", report.removed.size(), a.out.c_str());
    for (const auto& e : report.removed)
        std::printf("  prototype %d: %s\n", e.prototype, e.reason.c_str());
    return kExitOk;
}

// Numeric harness: full objective on a 2-image micro-batch, every parameter
// group against central finite differences.
int run_gradcheck(const GradcheckArgs& a, CLI::App* cmd) {
    using namespace protocase;
    Rng rng(a.seed);
    ModelConfig mc;
    mc.extractor = ExtractorConfig::micro();
    mc.input_h = 16;
    mc.input_w = 16;
    mc.prototypes_per_type = 2;
    ModelState st = init_model(mc, rng);
    st.set_requires_grad_extractor(true, true);
    st.set_requires_grad_prototypes(true);
    st.h1->requires_grad = true;

    std::vector<Image> images;
    std::vector<Image> masks;
    std::vector<int> labels = {0, 2};
    for (int i = 0; i < 2; ++i) {
        Image im(mc.input_h, mc.input_w);
        for (auto& v : im.pix) v = rng.uniform01();
        images.push_back(std::move(im));
        Image mk(mc.input_h, mc.input_w);
        for (auto& v : mk.pix) v = rng.bernoulli(0.7) ? 1.0 : 0.0;
        masks.push_back(std::move(mk));
    }

    LossConfig loss_cfg;
    loss_cfg.k = st.pool_k();
    auto build = [&](ad::Tape& tape) {
        std::vector<ObjectiveItem> batch;
        for (std::size_t i = 0; i < images.size(); ++i)
            batch.push_back({image_to_tensor(images[i]), labels[i], &masks[i]});
        return total_objective(tape, batch, st, loss_cfg).total;
    };

    const auto report = ad::grad_check(build, st.named_parameters(), a.eps, a.tolerance);
    std::printf("gradcheck: eps=%g tolerance=%g\n", a.eps, a.tolerance);
    for (const auto& e : report.entries)
        std::printf("  %-24s max_rel_err=%.3e (analytic=%.6e numeric=%.6e)\n", e.name.c_str(),
                    e.max_rel_err, e.analytic, e.numeric);
    std::printf("gradcheck %s: max relative error %.3e\n", report.passed() ? "PASS" : "FAIL",
                report.max_rel_err);
    if (!a.out.empty()) {
        write_resolved_config(cmd, a.out);
        std::ofstream f(std::filesystem::path(a.out) / "gradcheck.txt");
        for (const auto& e : report.entries)
            f << e.name << " " << e.max_rel_err << "\n";
        f << "max_rel_err " << report.max_rel_err << "\n";
        f << (report.passed() ? "pass" : "fail") << "\n";
    }
    if (!report.passed()) throw protocase::NumericError("gradient check failed");
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"prototype-based case reasoning on synthetic margin data"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* cmd_gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    cmd_gen->add_option("--out", gen.out, "output dataset directory");
    cmd_gen->add_option("--seed", gen.cfg.seed, "generator seed")->capture_default_str();
    cmd_gen->add_option("--n-per-type", gen.cfg.n_per_type, "samples per margin type")
        ->capture_default_str();
    cmd_gen->add_option("--image-h", gen.cfg.image_h, "image height")->capture_default_str();
    cmd_gen->add_option("--image-w", gen.cfg.image_w, "image width")->capture_default_str();
    cmd_gen->add_option("--context-margin", gen.cfg.context_margin_px,
                        "lesion mask dilation in pixels")->capture_default_str();
    cmd_gen->add_option("--fine-fraction", gen.cfg.fine_fraction,
                        "fraction of samples with fine masks")->capture_default_str();
    cmd_gen->add_option("--confounder", gen.cfg.confounder_strength,
                        "corner tag correlation strength, 0 disables")->capture_default_str();
    cmd_gen->add_option("--train-frac", gen.cfg.train_frac, "training split fraction")
        ->capture_default_str();
    cmd_gen->add_option("--val-frac", gen.cfg.val_frac, "validation split fraction")
        ->capture_default_str();

    TrainArgs tr;
    auto* cmd_train = app.add_subcommand("train", "run the four-stage training schedule");
    cmd_train->add_option("--data", tr.data_dir, "dataset directory");
    cmd_train->add_option("--out", tr.opts.out_dir, "output directory for checkpoints and traces");
    cmd_train->add_option("--seed", tr.opts.schedule.seed, "training seed")->capture_default_str();
    cmd_train->add_option("--warmup-epochs", tr.opts.schedule.warmup_epochs,
                          "epochs training only add-on layers and prototypes")
        ->capture_default_str();
    cmd_train->add_option("--a1-epochs", tr.opts.schedule.a1_epochs_per_cycle,
                          "joint epochs per A-cycle")->capture_default_str();
    cmd_train->add_option("--a3-steps", tr.opts.schedule.a3_steps_per_cycle,
                          "h1 descent steps per A-cycle")->capture_default_str();
    cmd_train->add_option("--max-cycles", tr.opts.schedule.max_cycles, "A-cycle cap")
        ->capture_default_str();
    cmd_train->add_option("--tol", tr.opts.schedule.convergence_tol,
                          "relative cycle-loss convergence tolerance")->capture_default_str();
    cmd_train->add_option("--lr-joint", tr.opts.schedule.lr_joint, "A1 learning rate")
        ->capture_default_str();
    cmd_train->add_option("--lr-h1", tr.opts.schedule.lr_h1, "A3 learning rate")
        ->capture_default_str();
    cmd_train->add_option("--lr-b", tr.opts.schedule.lr_b, "stage B learning rate")
        ->capture_default_str();
    cmd_train->add_option("--batch-size", tr.opts.schedule.batch_size, "minibatch size")
        ->capture_default_str();
    cmd_train->add_flag("!--no-ratio-batches", tr.opts.schedule.ratio_batches,
                        "disable the fine/lesion batch composition ratio");
    cmd_train->add_option("--fine-per-batch", tr.opts.schedule.fine_per_batch,
                          "finely annotated slots per batch")->capture_default_str();
    cmd_train->add_option("--lambda-cluster", tr.opts.loss.lambda_cluster, "cluster coefficient")
        ->capture_default_str();
    cmd_train->add_option("--lambda-sep", tr.opts.loss.lambda_sep, "separation coefficient")
        ->capture_default_str();
    cmd_train->add_option("--lambda-fine", tr.opts.loss.lambda_fine, "fine-annotation coefficient")
        ->capture_default_str();
    cmd_train->add_flag("--normalize-fine", tr.opts.loss.normalize_fine,
                        "normalize fine-loss norms by pixel count");
    cmd_train->add_option("--pool-fraction", tr.opts.model.pool_fraction,
                          "top-c fraction for pooling")->capture_default_str();
    cmd_train->add_option("--epsilon-sim", tr.opts.model.epsilon_sim,
                          "similarity transform epsilon")->capture_default_str();
    cmd_train->add_option("--prototypes-per-type", tr.opts.model.prototypes_per_type,
                          "initial prototypes per margin type")->capture_default_str();
    cmd_train->add_option("--resume", tr.opts.resume_checkpoint,
                          "resume from a stage-boundary checkpoint");

    EvalArgs ev;
    auto* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint and/or external maps");
    cmd_eval->add_option("--model", ev.model, "checkpoint path");
    cmd_eval->add_option("--data", ev.data_dir, "dataset directory");
    cmd_eval->add_option("--split", ev.split, "train|validation|test")->capture_default_str();
    cmd_eval->add_option("--out", ev.out, "output directory")->capture_default_str();
    cmd_eval->add_option("--attention-maps", ev.attention_maps,
                         "directory of <id>.png maps scored with activation precision");
    cmd_eval->add_option("--tau", ev.tau, "activation precision threshold")->capture_default_str();
    cmd_eval->add_option("--bootstrap", ev.bootstrap_resamples, "bootstrap resamples")
        ->capture_default_str();
    cmd_eval->add_option("--bootstrap-seed", ev.bootstrap_seed, "bootstrap seed")
        ->capture_default_str();

    ExplainArgs ex;
    auto* cmd_explain = app.add_subcommand("explain", "write per-case explanation reports");
    cmd_explain->add_option("--model", ex.model, "checkpoint path");
    cmd_explain->add_option("--data", ex.data_dir, "dataset directory");
    cmd_explain->add_option("--out", ex.out, "output directory");
    cmd_explain->add_option("--case", ex.cases, "sample id to explain (repeatable)");
    cmd_explain->add_option("--split", ex.split, "split for --limit selection")
        ->capture_default_str();
    cmd_explain->add_option("--limit", ex.limit, "number of cases when --case is absent")
        ->capture_default_str();
    cmd_explain->add_option("--top-evidence", ex.top_evidence, "evidence rows per case")
        ->capture_default_str();
    cmd_explain->add_flag("--prototypes", ex.prototypes, "also write prototype self-activations");
    cmd_explain->add_option("--tau", ex.tau, "crop threshold")->capture_default_str();

    PruneArgs pr;
    auto* cmd_prune = app.add_subcommand("prune", "deactivate duplicate/wrong-sign prototypes");
    cmd_prune->add_option("--model", pr.model, "input checkpoint");
    cmd_prune->add_option("--out", pr.out, "output checkpoint path");
    cmd_prune->add_flag("--no-duplicate-source", pr.no_duplicate_source,
                        "skip the duplicate-source criterion");
    cmd_prune->add_flag("--no-wrong-sign", pr.no_wrong_sign, "skip the wrong-sign criterion");

    GradcheckArgs gc;
    auto* cmd_gc = app.add_subcommand("gradcheck", "finite-difference check of the full objective");
    cmd_gc->add_option("--seed", gc.seed, "micro-instance seed")->capture_default_str();
    cmd_gc->add_option("--eps", gc.eps, "finite-difference step")->capture_default_str();
    cmd_gc->add_option("--tolerance", gc.tolerance, "max relative error allowed")
        ->capture_default_str();
    cmd_gc->add_option("--out", gc.out, "optional output directory for the report");

    std::string config_path;
    for (auto* cmd : {cmd_gen, cmd_train, cmd_eval, cmd_explain, cmd_prune, cmd_gc})
        cmd->add_option("--config", config_path,
                        "flat key=value configuration file; flags take precedence");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (!config_path.empty())
            for (auto* cmd : {cmd_gen, cmd_train, cmd_eval, cmd_explain, cmd_prune, cmd_gc})
                if (cmd->parsed()) apply_config_file(cmd, config_path);
        if (cmd_gen->parsed()) return run_gen_data(gen, cmd_gen);
        if (cmd_train->parsed()) return run_train(tr, cmd_train);
        if (cmd_eval->parsed()) return run_eval(ev, cmd_eval);
        if (cmd_explain->parsed()) return run_explain(ex, cmd_explain);
        if (cmd_prune->parsed()) return run_prune(pr, cmd_prune);
        if (cmd_gc->parsed()) return run_gradcheck(gc, cmd_gc);
    } catch (const protocase::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const protocase::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const protocase::NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    }
    return kExitOk;
}
