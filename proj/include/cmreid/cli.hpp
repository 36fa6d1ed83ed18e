#pragma once

// Command-line front end. Requires CLI11 on the include path.
//
// Subcommands: gradcheck, train, eval, synth, project. Every subcommand reads
// an optional --config INI file, then its shorthand flags, then any
// --section.key=value overrides, in that order. Exit status: 0 success,
// 1 failed check, 2 usage error, 3 input error, 4 training error.

#include <CLI11.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cmreid/config.hpp"
#include "cmreid/data/embedding_dump.hpp"
#include "cmreid/data/manifest.hpp"
#include "cmreid/data/synth.hpp"
#include "cmreid/embed.hpp"
#include "cmreid/eval.hpp"
#include "cmreid/grad_suite.hpp"
#include "cmreid/trainer.hpp"

namespace cmreid::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kInput = 3, kTraining = 4 };

// Fields that never go into artifact headers, so that runs writing to
// different places still produce identical files.
inline const std::set<std::string> kLocationFields{"run.out", "run.projection"};

// ---------------------------------------------------------------------------
// Typed configs from the field map.

inline Shape shape_field(RunConfig& cfg, const std::string& key, const Shape& fallback) {
    const auto dims = cfg.get_sizes(key, fallback);
    if (dims.size() != 3) throw UsageError(key + ": expected three dimensions C,H,W");
    return Shape(dims.begin(), dims.end());
}

inline SynthConfig synth_config(RunConfig& cfg, std::uint64_t default_draw, const Shape& default_shape) {
    const std::uint64_t seed = cfg.get_u64("run.seed", 0);
    SynthConfig s;
    s.identities = cfg.get_size("data.identities", s.identities);
    s.samples_per_modality = cfg.get_size("data.samples_per_modality", s.samples_per_modality);
    s.shape = shape_field(cfg, "data.shape", default_shape);
    s.center_scale = cfg.get_double("data.center_scale", s.center_scale);
    s.noise = cfg.get_double("data.noise", s.noise);
    s.modality_offset = cfg.get_double("data.modality_offset", s.modality_offset);
    s.seed = cfg.get_u64("data.seed", seed);
    s.draw = cfg.get_u64("data.draw", default_draw);
    try {
        s.validate();
    } catch (const ParameterError& e) {
        throw UsageError(std::string("data: ") + e.what());
    }
    return s;
}

/// The dataset named by data.manifest, or a synthetic one when data.synth is set.
inline Dataset resolve_dataset(RunConfig& cfg, std::uint64_t default_draw, const Shape& default_shape) {
    if (cfg.get_bool("data.synth", false)) return synth_generate(synth_config(cfg, default_draw, default_shape));
    const std::string manifest = cfg.get_string("data.manifest", "");
    if (manifest.empty()) throw UsageError("no dataset: pass --manifest PATH or --synth");
    return load_dataset(manifest);
}

inline EncoderConfig encoder_config(RunConfig& cfg, const Shape& input_shape) {
    EncoderConfig e;
    e.input_shape = input_shape;
    e.private_widths = cfg.get_sizes("encoder.private_widths", e.private_widths);
    e.shared_widths = cfg.get_sizes("encoder.shared_widths", e.shared_widths);
    e.embedding_dim = cfg.get_size("encoder.embedding_dim", e.embedding_dim);
    e.gem_p = cfg.get_double("encoder.gem_p", e.gem_p);
    e.non_local = cfg.get_bool("encoder.non_local", e.non_local);
    e.tied_private_init = cfg.get_bool("encoder.tied_private_init", e.tied_private_init);
    e.seed = cfg.get_u64("encoder.seed", cfg.get_u64("run.seed", 0));
    try {
        e.validate();
    } catch (const ParameterError& err) {
        throw UsageError(err.what());
    }
    return e;
}

inline TrainConfig train_config(RunConfig& cfg) {
    TrainConfig t;
    t.batch_size = cfg.get_size("train.batch_size", t.batch_size);
    t.steps = cfg.get_size("train.steps", t.steps);
    t.learning_rate = cfg.get_double("train.learning_rate", t.learning_rate);
    t.decay_factor = cfg.get_double("train.decay_factor", t.decay_factor);
    t.decay_steps = cfg.get_sizes("train.decay_steps", t.decay_steps);
    t.warmup_steps = cfg.get_size("train.warmup_steps", t.warmup_steps);
    t.erase_probability = cfg.get_double("train.erase_probability", t.erase_probability);
    t.clip_norm = cfg.get_double("train.clip_norm", t.clip_norm);
    t.snapshot_every = cfg.get_size("train.snapshot_every", t.snapshot_every);
    t.seed = cfg.get_u64("train.seed", cfg.get_u64("run.seed", 0));
    LossConfig& l = t.loss;
    l.margin = cfg.get_double("loss.margin", l.margin);
    l.compactness = cfg.get_bool("loss.compactness", l.compactness);
    l.compactness_negated = cfg.get_bool("loss.compactness_negated", l.compactness_negated);
    l.label_smoothing = cfg.get_double("loss.label_smoothing", l.label_smoothing);
    try {
        l.ranking = parse_ranking_loss(cfg.get_string("loss.ranking", to_string(l.ranking)));
        l.weight_rank = cfg.get_double("loss.weight_rank", l.weight_rank);
        l.weight_cmkd = cfg.get_double("loss.weight_cmkd", l.weight_cmkd);
        l.weight_id = cfg.get_double("loss.weight_id", l.weight_id);
        t.validate();
    } catch (const ParameterError& e) {
        throw UsageError(e.what());
    }
    return t;
}

inline ProtocolConfig protocol_config(RunConfig& cfg, ProtocolTag& tag) {
    ProtocolConfig p;
    try {
        tag = parse_protocol(cfg.get_string("eval.protocol", to_string(ProtocolTag::all_search)));
    } catch (const ParameterError& e) {
        throw UsageError(std::string("eval.protocol: ") + e.what());
    }
    p.trials = cfg.get_size("eval.trials", p.trials);
    p.draw_per_identity = cfg.get_size("eval.draw_per_identity", p.draw_per_identity);
    p.seed = cfg.get_u64("eval.seed", cfg.get_u64("run.seed", 0));
    if (p.trials < 1) throw UsageError("eval.trials must be >= 1");
    return p;
}

/// "eat=0,cmkd=0.5" style weights; eat (alias rank) selects the ranking term.
inline void apply_loss_weights(RunConfig& cfg, const std::vector<std::string>& items) {
    for (const std::string& item : items) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw UsageError("--loss-weights: expected term=value, got '" + item + "'");
        const std::string term = item.substr(0, eq);
        std::string key;
        if (term == "eat" || term == "rank") key = "loss.weight_rank";
        else if (term == "cmkd") key = "loss.weight_cmkd";
        else if (term == "id") key = "loss.weight_id";
        else throw UsageError("--loss-weights: unknown term '" + term + "' (expected eat, cmkd or id)");
        cfg.set(key, item.substr(eq + 1));
    }
}

// ---------------------------------------------------------------------------
// Embedding sources shared by eval and project.

inline EmbeddingDump embed_from_checkpoint(RunConfig& cfg, const std::string& checkpoint) {
    const Checkpoint ck = load_checkpoint(checkpoint);
    // Synthetic evaluation data defaults to a fresh noise draw (draw 1).
    const Dataset data = resolve_dataset(cfg, 1, ck.encoder.input_shape);
    return embed_dataset(data, ck.make_encoder());
}

inline std::optional<EmbeddingDump> single_dump(RunConfig& cfg) {
    const std::string dump = cfg.get_string("input.dump", "");
    const std::string checkpoint = cfg.get_string("input.checkpoint", "");
    if (!dump.empty() && !checkpoint.empty()) throw UsageError("pass either --dump or --checkpoint, not both");
    if (!dump.empty()) return read_embeddings(dump);
    if (!checkpoint.empty()) return embed_from_checkpoint(cfg, checkpoint);
    return std::nullopt;
}

inline RetrievalInstance split_instance(const EmbeddingDump& query, const EmbeddingDump& gallery, ProtocolTag tag) {
    if (query.dim != gallery.dim) {
        throw DimensionError("query dump has dimension " + std::to_string(query.dim) + " but gallery dump has " +
                             std::to_string(gallery.dim));
    }
    RetrievalInstance r;
    r.tag = tag;
    for (const DumpRow& row : query.rows) {
        r.query.push_back(row.values);
        r.query_labels.push_back(row.identity);
    }
    for (const DumpRow& row : gallery.rows) {
        r.gallery.push_back(row.values);
        r.gallery_labels.push_back(row.identity);
    }
    r.validate();
    return r;
}

inline std::vector<std::string> header(const std::string& command, const RunConfig& cfg) {
    std::vector<std::string> out{"cmreid " + command};
    for (const std::string& line : cfg.lines(kLocationFields)) {
        if (line.back() != '=') out.push_back(line);  // unset paths
    }
    return out;
}

inline std::filesystem::path output_dir(RunConfig& cfg, const std::string& fallback) {
    const std::filesystem::path dir = cfg.get_string("run.out", fallback);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error("cannot create output directory '" + dir.string() + "': " + ec.message());
    return dir;
}

// ---------------------------------------------------------------------------
// Commands. Each takes the merged field map.

inline int cmd_gradcheck(RunConfig& cfg, std::ostream& out, std::ostream& err) {
    GradSuiteOptions opt;
    opt.configs = cfg.get_size("gradcheck.configs", opt.configs);
    opt.seed = cfg.get_u64("gradcheck.seed", cfg.get_u64("run.seed", 0));
    opt.inject_bug = cfg.get_double("gradcheck.inject_bug", 0.0);
    std::vector<std::string> suites;
    {
        std::string raw = cfg.get_string("gradcheck.suites", "all");
        for (char& c : raw) {
            if (c == ',') c = ' ';
        }
        for (std::string_view s : text::split_fields(raw)) suites.emplace_back(s);
        if (suites.empty() || (suites.size() == 1 && suites.front() == "all")) suites = grad_suite_names();
    }
    if (opt.configs == 0) throw UsageError("gradcheck.configs must be >= 1");
    const auto known = grad_suite_names();
    for (const std::string& s : suites) {
        if (std::find(known.begin(), known.end(), s) == known.end()) throw UsageError("gradcheck.suites: unknown suite '" + s + "'");
    }
    cfg.reject_unused();

    for (const std::string& c : header("gradcheck", cfg)) out << "# " << c << '\n';
    out << "suite\tconfigs\tmax_rel_error\tworst_config\tworst_param\tstatus\n";
    bool all_pass = true;
    for (const std::string& name : suites) {
        const GradSuiteResult r = run_grad_suite(name, opt);
        std::ostringstream e;
        e << std::scientific << std::setprecision(3) << r.max_relative_error;
        out << r.name << '\t' << r.configs << '\t' << e.str() << '\t' << r.worst_config << '\t' << r.worst_param << '\t'
            << (r.pass ? "PASS" : "FAIL") << '\n';
        if (!r.pass) {
            all_pass = false;
            err << "gradient check failed: " << r.name << ", parameter " << r.worst_param << ", config "
                << r.worst_config << ", relative error " << e.str() << " > " << opt.tolerance << '\n';
        }
    }
    return all_pass ? kOk : kCheckFailed;
}

inline int cmd_train(RunConfig& cfg, std::ostream& out, std::ostream&) {
    const Dataset data = resolve_dataset(cfg, 0, SynthConfig{}.shape);
    const EncoderConfig ec = encoder_config(cfg, data.sample_shape());
    const TrainConfig tc = train_config(cfg);
    std::optional<Dataset> eval_set;
    if (tc.snapshot_every > 0 && cfg.get_bool("data.synth", false)) {
        SynthConfig s = synth_config(cfg, 0, ec.input_shape);
        s.draw = cfg.get_u64("eval.synth_draw", 1);
        eval_set = synth_generate(s);
    } else if (tc.snapshot_every > 0) {
        const std::string path = cfg.get_string("data.eval_manifest", "");
        if (path.empty()) throw UsageError("train.snapshot_every needs data.eval_manifest when training from a manifest");
        eval_set = load_dataset(path);
    }
    const std::filesystem::path dir = output_dir(cfg, "cmreid-run");
    cfg.reject_unused();

    const auto comments = header("train", cfg);
    for (const std::string& c : comments) out << "# " << c << '\n';
    const TrainResult result = train(data, ec, tc, eval_set ? &*eval_set : nullptr);

    save_checkpoint(result.checkpoint, (dir / "checkpoint.txt").string(), comments);
    {
        auto f = text::open_output((dir / "history.tsv").string());
        write_history(f, result.history, comments);
        if (!f) throw Error("failed writing history");
    }
    {
        auto f = text::open_output((dir / "config.ini").string());
        write_config(f, cfg, std::vector<std::string>{"cmreid train, effective configuration"});
    }
    if (!result.history.snapshots.empty()) {
        auto f = text::open_output((dir / "snapshots.tsv").string());
        for (const std::string& c : comments) f << "# " << c << '\n';
        write_snapshots(f, result.history);
    }
    const HistoryRow& first = result.history.rows.front();
    const HistoryRow& last = result.history.rows.back();
    out << "steps=" << result.history.rows.size() << " first_total=" << text::format_double(first.losses.back())
        << " final_total=" << text::format_double(last.losses.back()) << '\n'
        << "wrote " << (dir / "checkpoint.txt").string() << ", history.tsv, config.ini\n";
    return kOk;
}

inline int cmd_eval(RunConfig& cfg, std::ostream& out, std::ostream&) {
    ProtocolTag tag{};
    const ProtocolConfig pc = protocol_config(cfg, tag);
    const std::string qpath = cfg.get_string("input.query_dump", "");
    const std::string gpath = cfg.get_string("input.gallery_dump", "");
    RetrievalInstance inst;
    std::optional<EmbeddingDump> dump;
    if (!qpath.empty() || !gpath.empty()) {
        if (qpath.empty() || gpath.empty()) throw UsageError("--query-dump and --gallery-dump go together");
        inst = split_instance(read_embeddings(qpath), read_embeddings(gpath), tag);
    } else {
        dump = single_dump(cfg);
        if (!dump) throw UsageError("no embeddings: pass --checkpoint, --dump or --query-dump/--gallery-dump");
        inst = retrieval_from_dump(*dump, tag);
    }
    const std::string report_path = cfg.get_string("run.out", "");
    const std::string projection = cfg.get_string("run.projection", "");
    if (!projection.empty() && !dump) throw UsageError("--projection needs a single dump or a checkpoint");
    cfg.reject_unused();

    const EvalReport report = evaluate_protocol(inst, pc);
    const auto comments = header("eval", cfg);
    if (report_path.empty()) {
        write_report(out, report, comments);
    } else {
        write_report(report, report_path, comments);
        out << "rank1=" << text::format_double(report.mean.cmc[0]) << " mAP=" << text::format_double(report.mean.map)
            << " trials=" << report.trials.size() << "\nwrote " << report_path << '\n';
    }
    if (!projection.empty()) {
        Embeddings x;
        for (const DumpRow& r : dump->rows) x.push_back(r.values);
        const Projection p = project_2d(x);
        auto tsv = text::open_output(projection + ".tsv");
        write_projection_tsv(tsv, p, dump->rows, comments);
        auto svg = text::open_output(projection + ".svg");
        write_projection_svg(svg, p, dump->rows);
    }
    return kOk;
}

inline int cmd_synth(RunConfig& cfg, std::ostream& out, std::ostream&) {
    const SynthConfig sc = synth_config(cfg, 0, SynthConfig{}.shape);
    const std::string path = cfg.get_string("run.out", "synth.manifest");
    cfg.reject_unused();
    const std::filesystem::path parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    const Dataset data = synth_generate(sc);
    save_dataset(data, path, header("synth", cfg));
    out << "wrote " << data.size() << " records to " << path << '\n';
    return kOk;
}

inline int cmd_project(RunConfig& cfg, std::ostream& out, std::ostream&) {
    std::optional<EmbeddingDump> dump = single_dump(cfg);
    if (!dump) throw UsageError("no embeddings: pass --checkpoint or --dump");
    const std::string which = cfg.get_string("project.modality", "all");
    if (which != "all") {
        const Modality m = parse_modality(which);
        std::erase_if(dump->rows, [m](const DumpRow& r) { return r.modality != m; });
    }
    const std::string prefix = cfg.get_string("run.out", "projection");
    cfg.reject_unused();
    Embeddings x;
    for (const DumpRow& r : dump->rows) x.push_back(r.values);
    const Projection p = project_2d(x);
    const auto comments = header("project", cfg);
    {
        auto tsv = text::open_output(prefix + ".tsv");
        write_projection_tsv(tsv, p, dump->rows, comments);
    }
    {
        auto svg = text::open_output(prefix + ".svg");
        write_projection_svg(svg, p, dump->rows);
    }
    out << "projected " << x.size() << " embeddings" << (p.degenerate ? " (degenerate)" : "") << " to " << prefix
        << ".tsv and " << prefix << ".svg\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// Argument parsing.

namespace detail {

/// A string flag that maps onto one config field when given.
struct Field {
    std::string key;
    std::string value;
    CLI::Option* option = nullptr;
};

class Binder {
public:
    explicit Binder(CLI::App* app) : app_(app) {}

    void option(const std::string& flag, const std::string& key, const std::string& help) {
        fields_.push_back(std::make_unique<Field>());
        Field& f = *fields_.back();
        f.key = key;
        f.option = app_->add_option(flag, f.value, help + " [" + key + "]");
    }

    void flag(const std::string& flag, const std::string& key, const std::string& value, const std::string& help) {
        fields_.push_back(std::make_unique<Field>());
        Field& f = *fields_.back();
        f.key = key;
        f.value = value;
        f.option = app_->add_flag(flag)->description(help + " [" + key + "=" + value + "]");
    }

    void apply(RunConfig& cfg) const {
        for (const auto& f : fields_) {
            if (f->option->count() > 0) cfg.set(f->key, f->value);
        }
    }

private:
    CLI::App* app_;
    std::vector<std::unique_ptr<Field>> fields_;
};

struct Command {
    CLI::App* app = nullptr;
    std::unique_ptr<Binder> binder;
    std::string config_path;
    std::vector<std::string> loss_weights;
};

inline void data_flags(Binder& b) {
    b.option("--manifest", "data.manifest", "dataset manifest");
    b.flag("--synth", "data.synth", "true", "use a synthetic dataset");
    b.option("--identities", "data.identities", "synthetic identities");
    b.option("--samples", "data.samples_per_modality", "synthetic samples per identity and modality");
    b.option("--noise", "data.noise", "synthetic per-element noise");
    b.option("--offset", "data.modality_offset", "synthetic modality offset scale");
    b.option("--draw", "data.draw", "synthetic noise draw");
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Cross-modality re-identification toolkit", "cmreid"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "cmreid 0.1.0");

    std::map<std::string, detail::Command> commands;
    auto add = [&](const std::string& name, const std::string& help) -> detail::Command& {
        detail::Command& c = commands[name];
        c.app = app.add_subcommand(name, help);
        c.app->allow_extras();
        c.app->footer("Any field can also be set with --section.key=value (see README).");
        c.binder = std::make_unique<detail::Binder>(c.app);
        c.app->add_option("--config", c.config_path, "INI configuration file")->check(CLI::ExistingFile);
        c.binder->option("--seed", "run.seed", "base seed for every component");
        return c;
    };

    auto& gradcheck = add("gradcheck", "finite-difference check of every loss and encoder block");
    gradcheck.binder->option("--configs", "gradcheck.configs", "random configurations per suite");
    gradcheck.binder->option("--suites", "gradcheck.suites", "comma-separated suite names, or all");
    gradcheck.binder->flag("--inject-bug", "gradcheck.inject_bug", "0.1", "corrupt one analytic partial (negative control)");

    auto& train_cmd = add("train", "train the two-stream encoder");
    detail::data_flags(*train_cmd.binder);
    train_cmd.binder->option("--steps", "train.steps", "optimizer steps");
    train_cmd.binder->option("--batch", "train.batch_size", "tuples per batch");
    train_cmd.binder->option("--lr", "train.learning_rate", "base learning rate");
    train_cmd.binder->option("--ranking", "loss.ranking", "ranking loss: eat or euclidean-triplet");
    train_cmd.binder->option("--out", "run.out", "output directory");
    train_cmd.app->add_option("--loss-weights", train_cmd.loss_weights, "term weights, e.g. eat=0,cmkd=1,id=1")
        ->delimiter(',');

    auto& eval_cmd = add("eval", "cross-modality retrieval evaluation");
    detail::data_flags(*eval_cmd.binder);
    eval_cmd.binder->option("--checkpoint", "input.checkpoint", "checkpoint to embed the dataset with");
    eval_cmd.binder->option("--dump", "input.dump", "embedding dump holding both modalities");
    eval_cmd.binder->option("--query-dump", "input.query_dump", "query embeddings");
    eval_cmd.binder->option("--gallery-dump", "input.gallery_dump", "gallery embeddings");
    eval_cmd.binder->option("--protocol", "eval.protocol", "all-search, indoor-search, thermal-to-rgb or rgb-to-thermal");
    eval_cmd.binder->option("--trials", "eval.trials", "random gallery draws");
    eval_cmd.binder->option("--gallery-per-id", "eval.draw_per_identity", "gallery samples per identity, 0 for all");
    eval_cmd.binder->option("--out", "run.out", "report file (default: standard output)");
    eval_cmd.binder->option("--projection", "run.projection", "also write PREFIX.tsv and PREFIX.svg");

    auto& synth_cmd = add("synth", "write a synthetic dataset as manifest plus payload");
    detail::data_flags(*synth_cmd.binder);
    synth_cmd.binder->option("--out", "run.out", "manifest path");

    auto& project_cmd = add("project", "two-dimensional principal-component export");
    detail::data_flags(*project_cmd.binder);
    project_cmd.binder->option("--checkpoint", "input.checkpoint", "checkpoint to embed the dataset with");
    project_cmd.binder->option("--dump", "input.dump", "embedding dump");
    project_cmd.binder->option("--modality", "project.modality", "all, visible or infrared");
    project_cmd.binder->option("--out", "run.out", "output prefix");

    try {
        try {
            app.parse(argc, argv);
        } catch (const CLI::ParseError& e) {
            const int code = app.exit(e, out, err);
            return code == 0 ? kOk : kUsage;
        }
        for (auto& [name, c] : commands) {
            if (!c.app->parsed()) continue;
            RunConfig cfg;
            if (!c.config_path.empty()) load_config(c.config_path, cfg);
            c.binder->apply(cfg);
            apply_loss_weights(cfg, c.loss_weights);
            for (const std::string& extra : c.app->remaining()) {
                if (extra.rfind("--", 0) != 0 || extra.find('=') == std::string::npos) {
                    throw UsageError("unexpected argument '" + extra + "'");
                }
                apply_override(cfg, extra);
            }
            if (name == "gradcheck") return cmd_gradcheck(cfg, out, err);
            if (name == "train") return cmd_train(cfg, out, err);
            if (name == "eval") return cmd_eval(cfg, out, err);
            if (name == "synth") return cmd_synth(cfg, out, err);
            return cmd_project(cfg, out, err);
        }
        return kUsage;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const ParameterError& e) {
        err << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const TrainingError& e) {
        err << "training error: " << e.what() << '\n';
        return kTraining;
    } catch (const NumericError& e) {
        err << "training error: " << e.what() << '\n';
        return kTraining;
    } catch (const Error& e) {
        err << "input error: " << e.what() << '\n';
        return kInput;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kCheckFailed;
    }
}

}  // namespace cmreid::cli
