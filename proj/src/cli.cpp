#include "boxmask/cli.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"

#include "boxmask/checkpoint.hpp"
#include "boxmask/error.hpp"
#include "boxmask/plot.hpp"

namespace boxmask {
namespace fs = std::filesystem;
namespace {

std::string g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string f4(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) {
        throw IoError("cannot write " + path.string());
    }
    os << text;
}

std::string read_file(const fs::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw IoError("cannot read " + path.string());
    }
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// Refuses to reuse a non-empty directory unless forced.
void prepare_dir(const fs::path& dir, bool force) {
    if (fs::exists(dir) && !fs::is_directory(dir)) {
        throw IoError(dir.string() + " exists and is not a directory");
    }
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!force) {
            throw IoError("output directory " + dir.string() + " is not empty (use --force to overwrite)");
        }
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
}

std::string loss_csv_header() { return "step,epoch,lr,l_rpn_cls,l_rpn_reg,l_cls,l_reg,l_bm,l_total\n"; }

std::string loss_csv_row(int step, int epoch, double lr, const LossReport& r) {
    return std::to_string(step) + "," + std::to_string(epoch) + "," + g17(lr) + "," + g17(r.l_rpn_cls) + "," +
           g17(r.l_rpn_reg) + "," + g17(r.l_cls) + "," + g17(r.l_reg) + "," + g17(r.l_bm) + "," + g17(r.l_total) +
           "\n";
}

std::map<std::string, std::string> config_meta(const RunConfig& config) {
    std::map<std::string, std::string> meta;
    for (const std::string& key : config_keys()) {
        meta["config." + key] = get_config_value(config, key);
    }
    meta["code_version"] = kCodeVersion;
    return meta;
}

std::string per_class_chart(const EvalResult& result, const std::vector<std::pair<std::string, const EvalResult*>>& arms) {
    std::vector<std::string> categories;
    const ThresholdBlock* first = result.block(0.5);
    if (first == nullptr && !result.blocks.empty()) {
        first = &result.blocks.front();
    }
    if (first == nullptr) {
        return svg_bar_chart("per-class AP", {}, {}, "AP");
    }
    for (const ClassMetrics& c : first->classes) {
        categories.push_back("class " + std::to_string(c.label));
    }
    std::vector<Series> series;
    for (const auto& [name, r] : arms) {
        const ThresholdBlock* b = r->block(first->iou);
        Series s{name, {}};
        for (const ClassMetrics& c : first->classes) {
            double ap = 0.0;
            if (b != nullptr) {
                for (const ClassMetrics& d : b->classes) {
                    if (d.label == c.label) {
                        ap = d.ap;
                    }
                }
            }
            s.values.push_back(ap);
        }
        series.push_back(std::move(s));
    }
    char title[64];
    std::snprintf(title, sizeof title, "per-class AP at IoU %.2f", first->iou);
    return svg_bar_chart(title, categories, series, "AP");
}

void write_reports(const fs::path& dir, const std::string& stem, const EvalResult& result) {
    write_file(dir / (stem + ".txt"), to_text(result));
    write_file(dir / (stem + ".json"), to_json(result).dump(2) + "\n");
}

std::string metric(double v) { return std::isnan(v) ? "n/a" : f4(v); }

std::string delta_table(const EvalResult& base, const EvalResult& boxmask) {
    std::ostringstream os;
    os << "| metric | baseline | +BoxMask | delta |\n|---|---|---|---|\n";
    auto row = [&](const std::string& name, double b, double m) {
        os << "| " << name << " | " << metric(b) << " | " << metric(m) << " | "
           << (std::isnan(b) || std::isnan(m) ? "n/a" : (m - b >= 0 ? "+" : "") + f4(m - b)) << " |\n";
    };
    row("mAP@0.5", base.map_at(0.5), boxmask.map_at(0.5));
    row("mAP@0.75", base.map_at(0.75), boxmask.map_at(0.75));
    row("mAP@[0.5:0.95]", base.map_coco(), boxmask.map_coco());
    if (const ThresholdBlock* b = base.block(0.5)) {
        if (const ThresholdBlock* m = boxmask.block(0.5)) {
            for (const ClassMetrics& c : b->classes) {
                for (const ClassMetrics& d : m->classes) {
                    if (d.label == c.label) {
                        row("AP@0.5 class " + std::to_string(c.label), c.ap, d.ap);
                    }
                }
            }
        }
    }
    return os.str();
}

struct VariantResult {
    std::string name;
    RunConfig config;
    double map50 = 0.0;
    double map75 = 0.0;
    double map_coco = 0.0;
    std::size_t boxmask_params = 0;
    std::size_t total_params = 0;
};

// Trains and evaluates one variant for every ablation seed; metrics are
// seed means.
VariantResult run_variant(const std::string& name, RunConfig config, const Dataset& train, const Dataset& val,
                          const fs::path& dir, std::ostream& out) {
    VariantResult v{name, config};
    const std::vector<double> thresholds = coco_thresholds();
    for (std::uint64_t seed : config.ablate_seeds) {
        RunConfig c = config;
        c.seed = seed;
        const fs::path run_dir = dir / ("seed" + std::to_string(seed));
        prepare_dir(run_dir, true);
        TrainResult tr = train_model(c, train, run_dir);
        const EvalResult r = evaluate_model(*tr.detector, val, c.sampling, thresholds);
        write_reports(run_dir, "report", r);
        v.map50 += r.map_at(0.5);
        v.map75 += r.map_at(0.75);
        v.map_coco += r.map_coco();
        v.boxmask_params = tr.detector->parameters().numel("boxmask.");
        v.total_params = tr.detector->parameters().numel();
    }
    const double n = static_cast<double>(config.ablate_seeds.size());
    v.map50 /= n;
    v.map75 /= n;
    v.map_coco /= n;
    out << "  " << name << ": mAP@0.5 " << f4(v.map50) << " mAP@0.75 " << f4(v.map75) << "\n";
    return v;
}

Dataset load_split(const RunConfig& config, const std::string& split) {
    return load_dataset(fs::path(config.data_dir) / split);
}

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool force = false;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "config file (key = value lines)");
    cmd->add_option("--seed", c.seed, "random seed");
    cmd->add_option("--out", c.out, "output directory");
    cmd->add_flag("--force", c.force, "overwrite a non-empty output directory");
    cmd->add_option("--set", c.sets, "extra key=value override (repeatable)");
}

// defaults < config file < flags.
RunConfig resolve(const Common& c, RunConfig base, const std::vector<std::pair<std::string, std::string>>& flags) {
    if (!c.config_path.empty()) {
        apply_config_file(base, c.config_path);
    }
    for (const std::string& s : c.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) {
            throw InvalidArgument("--set expects key=value, got '" + s + "'");
        }
        set_config_value(base, s.substr(0, eq), s.substr(eq + 1));
    }
    if (c.seed) {
        base.seed = *c.seed;
    }
    for (const auto& [key, value] : flags) {
        set_config_value(base, key, value);
    }
    return base;
}

void flag(std::vector<std::pair<std::string, std::string>>& flags, const std::string& key,
          const std::optional<std::string>& value) {
    if (value) {
        flags.emplace_back(key, *value);
    }
}

int cmd_generate(const Common& common, const std::vector<std::pair<std::string, std::string>>& flags,
                 std::ostream& out) {
    const RunConfig config = resolve(common, RunConfig{}, flags);
    const fs::path dir = common.out.empty() ? fs::path(config.data_dir) : fs::path(common.out);
    prepare_dir(dir, common.force);
    const SceneSpec scene = config.resolved_scene();
    std::map<int, int> histogram;
    for (const auto& [split, count] : {std::pair<std::string, int>{"train", config.train_clips},
                                       std::pair<std::string, int>{"val", config.val_clips}}) {
        const Dataset ds = generate_dataset(scene, count, config.seed, split);
        write_dataset(dir / split, ds);
        int boxes = 0;
        for (const VideoClip& clip : ds.clips) {
            for (const auto& frame : clip.annotations) {
                for (const LabeledBox& b : frame) {
                    ++histogram[b.label];
                    ++boxes;
                }
            }
        }
        out << split << ": " << ds.clips.size() << " clips of " << scene.length << " frames at " << scene.width
            << "x" << scene.height << ", " << boxes << " boxes\n";
    }
    write_file(dir / "config.txt", config_to_text(config));
    out << "class histogram (boxes):";
    for (const auto& [label, count] : histogram) {
        out << " " << label << "=" << count;
    }
    out << "\n";
    return 0;
}

int cmd_train(const Common& common, const std::vector<std::pair<std::string, std::string>>& flags,
              std::ostream& out) {
    const RunConfig config = resolve(common, RunConfig{}, flags);
    const fs::path run_dir = common.out.empty() ? fs::path("runs") / "train" : fs::path(common.out);
    const Dataset train = load_split(config, "train");
    prepare_dir(run_dir, common.force);
    const TrainResult result = train_model(config, train, run_dir, &out);
    out << "checkpoint: " << result.checkpoint.string() << "\n";
    return 0;
}

int cmd_eval(const Common& common, const std::vector<std::pair<std::string, std::string>>& flags,
             const std::string& checkpoint, const std::string& baseline, std::ostream& out) {
    if (checkpoint.empty()) {
        throw InvalidArgument("eval requires --checkpoint");
    }
    RunConfig stored;
    std::unique_ptr<Detector> detector = load_detector(checkpoint, stored);
    const RunConfig config = resolve(common, stored, flags);
    const fs::path dir = common.out.empty() ? fs::path(checkpoint).parent_path().parent_path() / "eval"
                                            : fs::path(common.out);
    const Dataset val = load_split(config, "val");
    prepare_dir(dir, common.force);
    const EvalResult result = evaluate_model(*detector, val, config.sampling, config.eval_thresholds);
    write_reports(dir, "report", result);
    std::vector<std::pair<std::string, const EvalResult*>> arms{{"model", &result}};
    std::optional<EvalResult> base_result;
    if (!baseline.empty()) {
        RunConfig base_stored;
        std::unique_ptr<Detector> base = load_detector(baseline, base_stored);
        const RunConfig base_config = resolve(common, base_stored, flags);
        base_result = evaluate_model(*base, val, base_config.sampling, config.eval_thresholds);
        write_reports(dir, "baseline_report", *base_result);
        write_file(dir / "delta_table.md", delta_table(*base_result, result));
        arms = {{"baseline", &*base_result}, {"+BoxMask", &result}};
        out << delta_table(*base_result, result);
    }
    write_file(dir / "per_class_ap.svg", per_class_chart(result, arms));
    out << to_text(result);
    return 0;
}

void sweep_lambda(const RunConfig& config, const Dataset& train, const Dataset& val, const fs::path& out_dir,
                  std::ostream& out) {
    out << "lambda sweep\n";
    RunConfig base = config;
    base.detector.boxmask_enabled = false;
    const VariantResult b = run_variant("baseline", base, train, val, out_dir / "lambda" / "baseline", out);
    std::ostringstream table;
    table << "| variant | lambda | mAP@0.5 | mAP@0.75 | mAP@[0.5:0.95] |\n|---|---|---|---|---|\n";
    table << "| baseline | - | " << f4(b.map50) << " | " << f4(b.map75) << " | " << f4(b.map_coco) << " |\n";
    std::string zero_check;
    for (double lambda : config.ablate_lambdas) {
        RunConfig c = config;
        c.detector.boxmask_enabled = true;
        c.detector.lambda_bm = lambda;
        const std::string name = "lambda_" + get_config_value(c, "detector.lambda");
        const VariantResult v = run_variant(name, c, train, val, out_dir / "lambda" / name, out);
        table << "| +BoxMask | " << get_config_value(c, "detector.lambda") << " | " << f4(v.map50) << " | "
              << f4(v.map75) << " | " << f4(v.map_coco) << " |\n";
        if (lambda == 0.0) {
            const bool same = v.map50 == b.map50 && v.map75 == b.map75 && v.map_coco == b.map_coco;
            zero_check = std::string("lambda=0 matches baseline bit-for-bit: ") + (same ? "yes" : "no") + "\n";
        }
    }
    write_file(out_dir / "table_lambda.md", table.str() + (zero_check.empty() ? "" : "\n" + zero_check));
}

void sweep_n_conv(const RunConfig& config, const Dataset& train, const Dataset& val, const fs::path& out_dir,
                  std::ostream& out) {
    out << "n_conv sweep\n";
    std::ostringstream table;
    table << "| N_c | BoxMask params | total params | mAP@0.5 | mAP@0.75 | mAP@[0.5:0.95] |\n"
             "|---|---|---|---|---|---|\n";
    for (int n : config.ablate_n_conv) {
        RunConfig c = config;
        c.detector.boxmask_enabled = true;
        c.detector.n_conv = n;
        const std::string name = "n_conv_" + std::to_string(n);
        const VariantResult v = run_variant(name, c, train, val, out_dir / "n_conv" / name, out);
        table << "| " << n << " | " << v.boxmask_params << " | " << v.total_params << " | " << f4(v.map50) << " | "
              << f4(v.map75) << " | " << f4(v.map_coco) << " |\n";
    }
    write_file(out_dir / "table_n_conv.md", table.str());
}

void sweep_roi(const RunConfig& config, const Dataset& train, const Dataset& val, const fs::path& out_dir,
               std::ostream& out) {
    out << "roi-size sweep\n";
    std::ostringstream table;
    table << "| RoIAlign | upsampled | mask | mAP@0.5 | mAP@0.75 | mAP@[0.5:0.95] |\n|---|---|---|---|---|---|\n";
    for (const auto& [roi, up] : {std::pair{7, 7}, std::pair{7, 14}, std::pair{7, 28}, std::pair{14, 14}}) {
        RunConfig c = config;
        c.detector.boxmask_enabled = true;
        c.detector.roi_size = roi;
        c.detector.up_size = up;
        c.detector.mask_size = 0;
        const std::string name = "roi_" + std::to_string(roi) + "_up_" + std::to_string(up);
        const VariantResult v = run_variant(name, c, train, val, out_dir / "roi" / name, out);
        table << "| " << roi << "x" << roi << " | " << up << "x" << up << " | " << 2 * up << "x" << 2 * up << " | "
              << f4(v.map50) << " | " << f4(v.map75) << " | " << f4(v.map_coco) << " |\n";
    }
    write_file(out_dir / "table_roi.md", table.str());
}

void sweep_sampling(const RunConfig& config, const Dataset& train, const Dataset& val, const fs::path& out_dir,
                    std::ostream& out) {
    out << "sampling sweep\n";
    const fs::path dir = out_dir / "sampling";
    prepare_dir(dir, true);
    const std::vector<double> thresholds{0.5};
    std::ostringstream csv;
    csv << "seed,mode,T,S,map50\n";
    std::vector<double> consecutive(config.ablate_sampling_counts.size(), 0.0);
    std::vector<double> uniform(config.ablate_sampling_counts.size(), 0.0);
    std::vector<double> strided(config.ablate_sampling_strides.size(), 0.0);
    const int fixed_t = config.ablate_sampling_counts.empty() ? 2 : config.ablate_sampling_counts.back();
    for (std::uint64_t seed : config.ablate_seeds) {
        RunConfig c = config;
        c.seed = seed;
        const fs::path run_dir = dir / ("seed" + std::to_string(seed));
        prepare_dir(run_dir, true);
        TrainResult tr = train_model(c, train, run_dir);
        auto score = [&](SamplingMode mode, int t, int s) {
            SamplingPlan plan = c.sampling;
            plan.mode = mode;
            plan.count = t;
            plan.stride = s;
            const double m = evaluate_model(*tr.detector, val, plan, thresholds).map_at(0.5);
            csv << seed << "," << to_string(mode) << "," << t << "," << s << "," << g17(m) << "\n";
            return m;
        };
        for (std::size_t i = 0; i < config.ablate_sampling_counts.size(); ++i) {
            consecutive[i] += score(SamplingMode::strided, config.ablate_sampling_counts[i], 1);
            uniform[i] += score(SamplingMode::uniform, config.ablate_sampling_counts[i], 1);
        }
        for (std::size_t i = 0; i < config.ablate_sampling_strides.size(); ++i) {
            strided[i] += score(SamplingMode::strided, fixed_t, config.ablate_sampling_strides[i]);
        }
    }
    const double n = static_cast<double>(config.ablate_seeds.size());
    for (auto* v : {&consecutive, &uniform, &strided}) {
        for (double& x : *v) {
            x /= n;
        }
    }
    std::vector<double> t_axis(config.ablate_sampling_counts.begin(), config.ablate_sampling_counts.end());
    std::vector<double> s_axis(config.ablate_sampling_strides.begin(), config.ablate_sampling_strides.end());
    write_file(dir / "sampling.csv", csv.str());
    write_file(out_dir / "sampling_frames.svg",
               svg_line_chart("mAP@0.5 vs support frames", t_axis,
                              {{"consecutive (S=1)", consecutive}, {"uniform", uniform}}, "T", "mAP@0.5"));
    write_file(out_dir / "sampling_stride.svg",
               svg_line_chart("mAP@0.5 vs stride (T=" + std::to_string(fixed_t) + ")", s_axis,
                              {{"strided", strided}}, "S", "mAP@0.5"));
    std::ostringstream table;
    table << "| mode | T | S | mAP@0.5 |\n|---|---|---|---|\n";
    for (std::size_t i = 0; i < t_axis.size(); ++i) {
        table << "| consecutive | " << t_axis[i] << " | 1 | " << f4(consecutive[i]) << " |\n";
    }
    for (std::size_t i = 0; i < t_axis.size(); ++i) {
        table << "| uniform | " << t_axis[i] << " | - | " << f4(uniform[i]) << " |\n";
    }
    for (std::size_t i = 0; i < s_axis.size(); ++i) {
        table << "| strided | " << fixed_t << " | " << s_axis[i] << " | " << f4(strided[i]) << " |\n";
    }
    write_file(out_dir / "table_sampling.md", table.str());
}

int cmd_ablate(const Common& common, const std::vector<std::pair<std::string, std::string>>& flags,
               const std::vector<std::string>& sweeps, std::ostream& out) {
    const RunConfig config = resolve(common, RunConfig{}, flags);
    if (sweeps.empty()) {
        throw InvalidArgument("ablate: no sweep selected");
    }
    if (config.ablate_seeds.empty()) {
        throw InvalidArgument("ablate: sweep has zero variants (no seeds)");
    }
    for (const std::string& s : sweeps) {
        const bool empty = (s == "lambda" && config.ablate_lambdas.empty()) ||
                           (s == "n_conv" && config.ablate_n_conv.empty()) ||
                           (s == "sampling" && config.ablate_sampling_counts.empty() &&
                            config.ablate_sampling_strides.empty());
        if (empty) {
            throw InvalidArgument("ablate: sweep '" + s + "' has zero variants");
        }
    }
    const fs::path out_dir = common.out.empty() ? fs::path("runs") / "ablate" : fs::path(common.out);
    const Dataset train = load_split(config, "train");
    const Dataset val = load_split(config, "val");
    prepare_dir(out_dir, common.force);
    write_file(out_dir / "config.txt", config_to_text(config));
    write_file(out_dir / "VERSION", std::string(kCodeVersion) + "\n");
    for (const std::string& s : sweeps) {
        if (s == "lambda") {
            sweep_lambda(config, train, val, out_dir, out);
        } else if (s == "n_conv") {
            sweep_n_conv(config, train, val, out_dir, out);
        } else if (s == "roi") {
            sweep_roi(config, train, val, out_dir, out);
        } else if (s == "sampling") {
            sweep_sampling(config, train, val, out_dir, out);
        }
    }
    out << "tables written to " << out_dir.string() << "\n";
    return 0;
}

int cmd_plot(const std::string& input, const std::string& baseline, const std::string& output, std::ostream& out) {
    const fs::path in(input);
    std::string svg;
    if (in.extension() == ".json") {
        const EvalResult r = eval_result_from_json(nlohmann::json::parse(read_file(in)));
        if (baseline.empty()) {
            svg = per_class_chart(r, {{"model", &r}});
        } else {
            const EvalResult b = eval_result_from_json(nlohmann::json::parse(read_file(baseline)));
            svg = per_class_chart(r, {{"baseline", &b}, {"+BoxMask", &r}});
        }
    } else if (in.extension() == ".csv") {
        std::istringstream is(read_file(in));
        std::string line;
        std::getline(is, line);
        if (line + "\n" != loss_csv_header()) {
            throw FormatError(input + " is not a loss log");
        }
        std::vector<double> steps;
        std::vector<Series> series{{"l_cls", {}}, {"l_reg", {}}, {"l_bm", {}}, {"l_total", {}}};
        const int columns[] = {5, 6, 7, 8};
        while (std::getline(is, line)) {
            std::vector<double> row;
            std::istringstream ls(line);
            std::string cell;
            while (std::getline(ls, cell, ',')) {
                row.push_back(std::stod(cell));
            }
            if (row.size() != 9) {
                throw FormatError(input + ": malformed row '" + line + "'");
            }
            steps.push_back(row[0]);
            for (int i = 0; i < 4; ++i) {
                series[i].values.push_back(row[columns[i]]);
            }
        }
        svg = svg_line_chart("training losses", steps, series, "step", "loss");
    } else {
        throw InvalidArgument("plot: input must be a report .json or a loss_log .csv");
    }
    const fs::path target = output.empty() ? fs::path(in).replace_extension(".svg") : fs::path(output);
    write_file(target, svg);
    out << "wrote " << target.string() << "\n";
    return 0;
}

std::string quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\') {
            out += '\\';
        }
        out += c == '\n' ? ' ' : c;
    }
    return out + "\"";
}

} // namespace

TrainResult train_model(const RunConfig& config, const Dataset& train, const fs::path& run_dir,
                        std::ostream* progress) {
    TrainResult result;
    const DetectorConfig dc = config.resolved_detector();
    result.detector = std::make_unique<Detector>(dc);
    if (train.classes.size() != static_cast<std::size_t>(dc.num_classes)) {
        throw InvalidArgument("dataset has " + std::to_string(train.classes.size()) + " classes but config has " +
                              std::to_string(dc.num_classes));
    }
    std::ofstream log;
    if (!run_dir.empty()) {
        fs::create_directories(run_dir / "checkpoints");
        write_file(run_dir / "config.txt", config_to_text(config));
        write_file(run_dir / "VERSION", std::string(kCodeVersion) + "\n" + kEvaluatorVersion + "\n");
        log.open(run_dir / "loss_log.csv");
        log << loss_csv_header();
    }
    Trainer trainer(*result.detector, train, config.sampling);
    const int total = dc.total_steps();
    for (int step = 0; step < total; ++step) {
        const double lr = learning_rate_at(dc, step);
        const LossReport r = trainer.step();
        result.log.push_back(r);
        if (log.is_open()) {
            log << loss_csv_row(step, step / dc.steps_per_epoch, lr, r);
        }
        if (progress != nullptr && ((step + 1) % dc.steps_per_epoch == 0)) {
            *progress << "epoch " << (step + 1) / dc.steps_per_epoch << "/" << dc.epochs << " step " << step + 1
                      << " l_total " << f4(r.l_total) << " l_cls " << f4(r.l_cls) << " l_reg " << f4(r.l_reg)
                      << " l_bm " << f4(r.l_bm) << "\n";
        }
        if (!run_dir.empty() && config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 &&
            step + 1 < total) {
            char name[48];
            std::snprintf(name, sizeof name, "step_%06d.ckpt", step + 1);
            save_checkpoint(run_dir / "checkpoints" / name, result.detector->parameters(), config_meta(config));
        }
    }
    if (!run_dir.empty()) {
        result.checkpoint = run_dir / "checkpoints" / "final.ckpt";
        save_checkpoint(result.checkpoint, result.detector->parameters(), config_meta(config));
    }
    return result;
}

EvalResult evaluate_model(Detector& detector, const Dataset& data, const SamplingPlan& plan,
                          std::span<const double> thresholds, const InferenceOptions& options) {
    std::vector<FrameResult> frames;
    for (const VideoClip& clip : data.clips) {
        const auto dets = detector.infer_clip(clip, plan, options);
        for (int t = 0; t < clip.length(); ++t) {
            frames.push_back(FrameResult{dets[t], clip.annotations[t]});
        }
    }
    return compute_map(frames, thresholds, detector.config().num_classes);
}

std::unique_ptr<Detector> load_detector(const fs::path& checkpoint, RunConfig& config) {
    const Checkpoint ck = read_checkpoint(checkpoint);
    for (const auto& [key, value] : ck.meta) {
        if (key.rfind("config.", 0) == 0) {
            set_config_value(config, key.substr(7), value);
        }
    }
    auto detector = std::make_unique<Detector>(config.resolved_detector());
    load_parameters(ck, detector->parameters());
    return detector;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Two-stage video object detector with a BoxMask head"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kCodeVersion);

    Common common;
    std::optional<std::string> classes, train_clips, val_clips, boxmask, lambda, n_conv, roi_size, up_size,
        proposals, epochs, steps_per_epoch, thresholds, sampling, t_count, s_stride, data;
    std::string checkpoint, baseline, input, output;
    std::vector<std::string> sweeps{"lambda", "n_conv", "roi", "sampling"};

    CLI::App* gen = app.add_subcommand("generate", "write train/val synthetic video datasets");
    add_common(gen, common);
    gen->add_option("--classes", classes, "number of object classes");
    gen->add_option("--train-clips", train_clips, "training clip count");
    gen->add_option("--val-clips", val_clips, "validation clip count");

    CLI::App* train = app.add_subcommand("train", "train a detector");
    add_common(train, common);
    train->add_option("--data", data, "dataset directory (from generate)");
    train->add_option("--boxmask", boxmask, "on|off")->check(CLI::IsMember({"on", "off"}));
    train->add_option("--lambda", lambda, "BoxMask loss weight");
    train->add_option("--n-conv", n_conv, "BoxMask 3x3 conv layers");
    train->add_option("--roi-size", roi_size, "RoIAlign output size");
    train->add_option("--up-size", up_size, "upsampled RoI feature size");
    train->add_option("--proposals", proposals, "oracle|rpn")->check(CLI::IsMember({"oracle", "rpn"}));
    train->add_option("--epochs", epochs, "training epochs");
    train->add_option("--steps-per-epoch", steps_per_epoch, "SGD steps per epoch");

    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
    add_common(ev, common);
    ev->add_option("--data", data, "dataset directory (from generate)");
    ev->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required();
    ev->add_option("--baseline", baseline, "baseline checkpoint for a delta table");
    ev->add_option("--thresholds", thresholds, "comma-separated IoU thresholds");
    ev->add_option("--sampling", sampling, "uniform|strided")->check(CLI::IsMember({"uniform", "strided"}));
    ev->add_option("--T", t_count, "support frame count");
    ev->add_option("--S", s_stride, "support frame stride");

    CLI::App* abl = app.add_subcommand("ablate", "run ablation sweeps");
    add_common(abl, common);
    abl->add_option("--data", data, "dataset directory (from generate)");
    abl->add_option("--sweep", sweeps, "sweeps to run: lambda, n_conv, roi, sampling")
        ->check(CLI::IsMember({"lambda", "n_conv", "roi", "sampling"}));
    abl->add_option("--epochs", epochs, "training epochs per variant");
    abl->add_option("--steps-per-epoch", steps_per_epoch, "SGD steps per epoch per variant");

    CLI::App* plot = app.add_subcommand("plot", "render a report .json or loss_log .csv as SVG");
    plot->add_option("input", input, "report.json or loss_log.csv")->required();
    plot->add_option("--baseline", baseline, "baseline report.json for a side-by-side chart");
    plot->add_option("--out", output, "output .svg path");

    std::vector<const char*> argv{"boxmask"};
    for (const std::string& a : args) {
        argv.push_back(a.c_str());
    }
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error: kind=usage message=" << quote(e.what()) << "\n";
        return 2;
    }

    std::vector<std::pair<std::string, std::string>> flags;
    flag(flags, "data.dir", data);
    flag(flags, "data.classes", classes);
    flag(flags, "data.train_clips", train_clips);
    flag(flags, "data.val_clips", val_clips);
    flag(flags, "detector.boxmask", boxmask);
    flag(flags, "detector.lambda", lambda);
    flag(flags, "detector.n_conv", n_conv);
    flag(flags, "detector.roi_size", roi_size);
    flag(flags, "detector.up_size", up_size);
    flag(flags, "detector.proposals", proposals);
    flag(flags, "train.epochs", epochs);
    flag(flags, "train.steps_per_epoch", steps_per_epoch);
    flag(flags, "eval.thresholds", thresholds);
    flag(flags, "sampling.mode", sampling);
    flag(flags, "sampling.T", t_count);
    flag(flags, "sampling.S", s_stride);

    try {
        if (gen->parsed()) {
            return cmd_generate(common, flags, out);
        }
        if (train->parsed()) {
            return cmd_train(common, flags, out);
        }
        if (ev->parsed()) {
            return cmd_eval(common, flags, checkpoint, baseline, out);
        }
        if (abl->parsed()) {
            return cmd_ablate(common, flags, sweeps, out);
        }
        if (plot->parsed()) {
            return cmd_plot(input, baseline, output, out);
        }
    } catch (const Error& e) {
        err << "error: kind=" << e.kind() << " message=" << quote(e.what()) << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: kind=internal message=" << quote(e.what()) << "\n";
        return 1;
    }
    return 0;
}

} // namespace boxmask
