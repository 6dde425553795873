// Copyright 2026 The asymq Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

/**
 * @file harness.hpp
 * @brief Experiment orchestration: configuration sweeps, initialization-stability
 *        sweeps, fixed-vs-learned offsets and per-layer offset reports.
 *
 * Every QAT run in a study starts from one shared float-pretrained network, so the
 * studies isolate the effect of the quantizers. Runs are independent and may be
 * dispatched to a worker pool; results are stored by sweep coordinate, never by
 * completion order.
 */

#pragma once

#include <asymq/network.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace asymq {

enum class ExperimentKind : std::uint8_t { config_sweep, init_stability, fixed_offset, beta_report };

inline std::string_view experiment_kind_name(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::config_sweep: return "config_sweep";
        case ExperimentKind::init_stability: return "init_stability";
        case ExperimentKind::fixed_offset: return "fixed_offset";
        case ExperimentKind::beta_report: return "beta_report";
    }
    return "?";
}

inline ExperimentKind parse_experiment_kind(std::string_view s) {
    if (s == "config_sweep") return ExperimentKind::config_sweep;
    if (s == "init_stability") return ExperimentKind::init_stability;
    if (s == "fixed_offset") return ExperimentKind::fixed_offset;
    if (s == "beta_report") return ExperimentKind::beta_report;
    throw std::invalid_argument("unknown experiment kind '" + std::string(s) + "'");
}

/// W/A bit-width pair, written "WxAy" or just "b" for equal widths.
struct BitWidths {
    int weights = 4;
    int activations = 4;
    friend bool operator==(const BitWidths&, const BitWidths&) = default;
    friend auto operator<=>(const BitWidths&, const BitWidths&) = default;
};

inline std::string bits_label(const BitWidths& b) {
    return "W" + std::to_string(b.weights) + "A" + std::to_string(b.activations);
}

inline BitWidths parse_bits(std::string_view s) {
    auto to_int = [&](std::string_view t) {
        if (t.empty() || t.find_first_not_of("0123456789") != std::string_view::npos) {
            throw std::invalid_argument("bad bit-width '" + std::string(s) + "'");
        }
        const int v = std::stoi(std::string(t));
        quant_bounds(v, false);
        return v;
    };
    if (!s.empty() && (s[0] == 'W' || s[0] == 'w')) {
        const auto a = s.find_first_of("Aa");
        if (a == std::string_view::npos) throw std::invalid_argument("bad bit-width '" + std::string(s) + "'");
        return {to_int(s.substr(1, a - 1)), to_int(s.substr(a + 1))};
    }
    const int v = to_int(s);
    return {v, v};
}

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::config_sweep;
    std::string dataset = "digits";
    std::string architecture = "swish";  ///< conv-net activation, or "mlp-<activation>"
    std::vector<BitWidths> bits{{2, 2}, {4, 4}};
    std::vector<int> configs{1, 2, 3, 4};
    std::vector<InitScheme> schemes{InitScheme::lsqplus};
    std::vector<OffsetMode> offset_modes{OffsetMode::learned, OffsetMode::fixed_xmin, OffsetMode::fixed_zero};
    std::vector<std::uint64_t> seeds{1};
    std::uint64_t pretrain_seed = 0;
    TrainConfig pretrain{.epochs = 8, .batch_size = 32, .lr = 0.05f};
    TrainConfig qat{.epochs = 4, .batch_size = 32, .lr = 0.01f};
    GradScaleMode grad_scale = GradScaleMode::lsq;
    CalibrationOptions calibration;
    std::string checkpoint;  ///< float checkpoint; pretrained on the fly when empty
    std::string output_dir = "asymq_out";
    std::size_t jobs = 1;

    void validate() const {
        if (bits.empty() || configs.empty() || schemes.empty() || seeds.empty() || offset_modes.empty()) {
            throw std::invalid_argument("experiment: sweep lists must be non-empty");
        }
        if (std::set(seeds.begin(), seeds.end()).size() != seeds.size()) {
            throw std::invalid_argument("experiment: seeds must be distinct");
        }
        for (int c : configs) table_config(c, 4);
        if (qat.batch_size == 0 || pretrain.batch_size == 0) throw std::invalid_argument("experiment: batch size must be positive");
        if (!(qat.lr > 0.0f) || !(pretrain.lr > 0.0f)) throw std::invalid_argument("experiment: learning rate must be positive");
        if (jobs == 0) throw std::invalid_argument("experiment: jobs must be positive");
        if (kind == ExperimentKind::init_stability && seeds.size() < 2) {
            throw std::invalid_argument("experiment: init_stability needs at least 2 seeds");
        }
    }
};

// ---------------------------------------------------------------------------
// Config file parsing: "[section]" headers and "key = value" lines; '#' or ';'
// start comments. Unknown sections or keys are errors.
// ---------------------------------------------------------------------------

class ConfigError : public std::runtime_error {
public:
    ConfigError(std::size_t line, const std::string& msg)
        : std::runtime_error("line " + std::to_string(line) + ": " + msg), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(std::string_view s, char sep = ',') {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto pos = s.find(sep, start);
        const auto item = trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (!item.empty()) out.push_back(item);
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

template <typename T>
T parse_number(const std::string& v) {
    std::istringstream is(v);
    T out{};
    is >> out;
    if (!is || !is.eof()) throw std::invalid_argument("expected a number, got '" + v + "'");
    if constexpr (std::is_unsigned_v<T>) {
        if (!v.empty() && v[0] == '-') throw std::invalid_argument("expected a non-negative number, got '" + v + "'");
    }
    return out;
}

inline void apply_train_key(TrainConfig& t, const std::string& key, const std::string& v) {
    if (key == "epochs") t.epochs = parse_number<std::size_t>(v);
    else if (key == "batch_size") t.batch_size = parse_number<std::size_t>(v);
    else if (key == "lr") t.lr = parse_number<float>(v);
    else if (key == "momentum") t.momentum = parse_number<float>(v);
    else if (key == "weight_decay") t.weight_decay = parse_number<float>(v);
    else if (key == "seed") t.seed = parse_number<std::uint64_t>(v);
    else if (key == "scale_lr_mult") t.scale_lr_mult = parse_number<float>(v);
    else if (key == "offset_lr_mult") t.offset_lr_mult = parse_number<float>(v);
    else if (key == "max_steps") t.max_steps = parse_number<std::size_t>(v);
    else throw std::invalid_argument("unknown key '" + key + "'");
}

inline void apply_key(ExperimentConfig& c, const std::string& section, const std::string& key, const std::string& v) {
    if (section == "experiment") {
        if (key == "kind") c.kind = parse_experiment_kind(v);
        else if (key == "dataset") c.dataset = v;
        else if (key == "architecture") c.architecture = v;
        else if (key == "output_dir") c.output_dir = v;
        else if (key == "checkpoint") c.checkpoint = v;
        else if (key == "jobs") c.jobs = parse_number<std::size_t>(v);
        else if (key == "pretrain_seed") c.pretrain_seed = parse_number<std::uint64_t>(v);
        else if (key == "grad_scale") {
            if (v == "lsq") c.grad_scale = GradScaleMode::lsq;
            else if (v == "unit") c.grad_scale = GradScaleMode::unit;
            else throw std::invalid_argument("grad_scale must be lsq or unit");
        } else if (key == "bits") {
            c.bits.clear();
            for (const auto& b : split_list(v)) c.bits.push_back(parse_bits(b));
        } else if (key == "configs") {
            c.configs.clear();
            for (const auto& b : split_list(v)) c.configs.push_back(parse_number<int>(b));
        } else if (key == "schemes") {
            c.schemes.clear();
            for (const auto& b : split_list(v)) c.schemes.push_back(parse_init_scheme(b));
        } else if (key == "offset_modes") {
            c.offset_modes.clear();
            for (const auto& b : split_list(v)) c.offset_modes.push_back(parse_offset_mode(b));
        } else if (key == "seeds") {
            c.seeds.clear();
            for (const auto& b : split_list(v)) c.seeds.push_back(parse_number<std::uint64_t>(b));
        } else {
            throw std::invalid_argument("unknown key '" + key + "'");
        }
    } else if (section == "train" || section == "qat") {
        apply_train_key(c.qat, key, v);
    } else if (section == "pretrain") {
        apply_train_key(c.pretrain, key, v);
    } else if (section == "calibration") {
        if (key == "batches") c.calibration.batches = parse_number<std::size_t>(v);
        else if (key == "batch_size") c.calibration.batch_size = parse_number<std::size_t>(v);
        else if (key == "mse_steps") c.calibration.mse.total_steps = parse_number<int>(v);
        else throw std::invalid_argument("unknown key '" + key + "'");
    } else {
        throw std::invalid_argument("unknown section [" + section + "]");
    }
}

}  // namespace detail

/// Parses a config file; errors carry the offending line number.
inline ExperimentConfig parse_experiment_config(std::istream& is, ExperimentConfig base = {}) {
    std::string line;
    std::string section = "experiment";
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find_first_of("#;");
        const std::string text = detail::trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (text.empty()) continue;
        if (text.front() == '[') {
            if (text.back() != ']' || text.size() < 3) throw ConfigError(lineno, "malformed section header '" + text + "'");
            section = detail::trim(std::string_view(text).substr(1, text.size() - 2));
            if (section != "experiment" && section != "train" && section != "qat" && section != "pretrain" &&
                section != "calibration") {
                throw ConfigError(lineno, "unknown section [" + section + "]");
            }
            continue;
        }
        const auto eq = text.find('=');
        if (eq == std::string::npos) throw ConfigError(lineno, "expected 'key = value', got '" + text + "'");
        const std::string key = detail::trim(std::string_view(text).substr(0, eq));
        const std::string value = detail::trim(std::string_view(text).substr(eq + 1));
        if (key.empty()) throw ConfigError(lineno, "empty key");
        try {
            detail::apply_key(base, section, key, value);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(lineno, e.what());
        } catch (const std::out_of_range& e) {
            throw ConfigError(lineno, std::string("value out of range: ") + e.what());
        }
    }
    try {
        base.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(lineno, e.what());
    }
    return base;
}

inline ExperimentConfig load_experiment_config(const std::string& path, ExperimentConfig base = {}) {
    std::ifstream is(path);
    if (!is) throw ConfigError(0, "cannot open config file '" + path + "'");
    return parse_experiment_config(is, std::move(base));
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

struct LayerParams {
    std::string name;
    float scale = 0.0f;
    float offset = 0.0f;
    float observed_min = 0.0f;
    friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct RunRecord {
    std::string experiment;
    std::string dataset;
    std::string architecture;
    BitWidths bits;
    int config = 0;
    std::string scheme;
    std::string offset_mode;
    std::uint64_t seed = 0;
    double final_val_acc = 0.0;
    double best_val_acc = 0.0;
    std::string trace;  ///< path of the per-epoch metrics CSV, if written
    std::vector<LayerParams> layers;
    double wall_seconds = 0.0;

    friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

inline std::vector<LayerParams> collect_layer_params(Network& net) {
    std::vector<LayerParams> out;
    for (Quantizer* q : net.all_quantizers()) {
        out.push_back({q->name, q->scale.item(), q->config.offset_enabled ? q->offset.item() : 0.0f, q->observed_min});
    }
    return out;
}

namespace detail {

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline std::string format_float(float v) {
    std::ostringstream os;
    os << std::setprecision(9) << v;
    return os.str();
}

inline std::string encode_layers(const std::vector<LayerParams>& layers) {
    std::string s;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (i) s += ';';
        s += layers[i].name + ':' + format_float(layers[i].scale) + ':' + format_float(layers[i].offset) + ':' +
             format_float(layers[i].observed_min);
    }
    return s;
}

inline std::vector<LayerParams> decode_layers(const std::string& s) {
    std::vector<LayerParams> out;
    for (const auto& item : split_list(s, ';')) {
        auto parts = split_list(item, ':');
        if (parts.size() != 4) throw FormatError("bad layer field '" + item + "'");
        out.push_back({parts[0], std::stof(parts[1]), std::stof(parts[2]), std::stof(parts[3])});
    }
    return out;
}

}  // namespace detail

inline constexpr std::string_view kRunCsvHeader =
    "experiment,dataset,architecture,bits,config,scheme,offset_mode,seed,final_val_acc,best_val_acc,trace,layers,wall_seconds";

/// Fields never contain commas: names are identifiers, layer lists use ';' and ':'.
inline void write_run_csv(std::ostream& os, std::span<const RunRecord> records) {
    os << kRunCsvHeader << '\n';
    for (const auto& r : records) {
        os << r.experiment << ',' << r.dataset << ',' << r.architecture << ',' << bits_label(r.bits) << ',' << r.config << ','
           << r.scheme << ',' << r.offset_mode << ',' << r.seed << ',' << detail::format_double(r.final_val_acc) << ','
           << detail::format_double(r.best_val_acc) << ',' << r.trace << ',' << detail::encode_layers(r.layers) << ','
           << detail::format_double(r.wall_seconds) << '\n';
    }
}

inline std::vector<RunRecord> read_run_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || detail::trim(line) != kRunCsvHeader) throw FormatError("run table: bad header");
    std::vector<RunRecord> out;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        std::vector<std::string> f;
        std::size_t start = 0;
        for (;;) {
            const auto pos = line.find(',', start);
            f.push_back(line.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
            if (pos == std::string::npos) break;
            start = pos + 1;
        }
        if (f.size() != 13) throw FormatError("run table line " + std::to_string(lineno) + ": expected 13 fields");
        try {
            RunRecord r;
            r.experiment = f[0];
            r.dataset = f[1];
            r.architecture = f[2];
            r.bits = parse_bits(f[3]);
            r.config = std::stoi(f[4]);
            r.scheme = f[5];
            r.offset_mode = f[6];
            r.seed = std::stoull(f[7]);
            r.final_val_acc = std::stod(f[8]);
            r.best_val_acc = std::stod(f[9]);
            r.trace = f[10];
            r.layers = detail::decode_layers(f[11]);
            r.wall_seconds = std::stod(detail::trim(f[12]));
            out.push_back(std::move(r));
        } catch (const std::logic_error& e) {
            throw FormatError("run table line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

struct AccuracyStats {
    double mean = 0.0;
    double best = 0.0;
    double half_range = 0.0;  ///< (max − min) / 2 across seeds
    std::size_t runs = 0;
};

inline AccuracyStats accuracy_stats(std::span<const double> values) {
    AccuracyStats s;
    s.runs = values.size();
    if (values.empty()) return s;
    double sum = 0.0;
    double lo = values[0], hi = values[0];
    for (double v : values) {
        sum += v;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    s.mean = sum / static_cast<double>(values.size());
    s.best = hi;
    s.half_range = (hi - lo) / 2.0;
    return s;
}

/// Groups records by every sweep coordinate except the seed.
struct CellKey {
    BitWidths bits;
    int config = 0;
    std::string scheme;
    std::string offset_mode;
    friend auto operator<=>(const CellKey&, const CellKey&) = default;
};

inline std::map<CellKey, AccuracyStats> summarize(std::span<const RunRecord> records) {
    std::map<CellKey, std::vector<double>> groups;
    for (const auto& r : records) groups[{r.bits, r.config, r.scheme, r.offset_mode}].push_back(r.final_val_acc);
    std::map<CellKey, AccuracyStats> out;
    for (const auto& [k, v] : groups) out[k] = accuracy_stats(v);
    return out;
}

inline void write_summary_csv(std::ostream& os, std::span<const RunRecord> records) {
    os << "bits,config,scheme,offset_mode,runs,mean_acc,best_acc,delta_acc\n";
    for (const auto& [k, s] : summarize(records)) {
        os << bits_label(k.bits) << ',' << k.config << ',' << k.scheme << ',' << k.offset_mode << ',' << s.runs << ','
           << detail::format_double(s.mean) << ',' << detail::format_double(s.best) << ','
           << detail::format_double(s.half_range) << '\n';
    }
}

/// Table-shaped text: one row per configuration (sweeps), scheme (stability) or offset
/// mode (fixed offsets), one column per bit-width, cells "mean ± Δacc (best)" in %.
inline void write_table(std::ostream& os, std::span<const RunRecord> records, ExperimentKind kind) {
    auto summary = summarize(records);
    std::set<BitWidths> bit_cols;
    std::vector<std::string> rows;
    auto row_of = [kind](const CellKey& k) -> std::string {
        switch (kind) {
            case ExperimentKind::init_stability: return k.scheme;
            case ExperimentKind::fixed_offset: return k.offset_mode;
            default: return "config " + std::to_string(k.config);
        }
    };
    for (const auto& [k, s] : summary) {
        bit_cols.insert(k.bits);
        if (std::find(rows.begin(), rows.end(), row_of(k)) == rows.end()) rows.push_back(row_of(k));
    }
    os << std::left << std::setw(16) << "" ;
    for (const auto& b : bit_cols) os << std::setw(28) << bits_label(b);
    os << '\n';
    for (const auto& row : rows) {
        os << std::setw(16) << row;
        for (const auto& b : bit_cols) {
            std::string cell = "-";
            for (const auto& [k, s] : summary) {
                if (k.bits == b && row_of(k) == row) {
                    std::ostringstream c;
                    c << std::fixed << std::setprecision(2) << 100.0 * s.mean << " ± " << 100.0 * s.half_range << " ("
                      << 100.0 * s.best << ")";
                    cell = c.str();
                }
            }
            os << std::setw(28) << cell;
        }
        os << '\n';
    }
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

/// Runs `n` independent jobs on up to `jobs` threads; job i writes only slot i.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

struct RunSpec {
    BitWidths bits;
    int config = 4;
    InitScheme scheme = InitScheme::lsqplus;
    OffsetMode offset_mode = OffsetMode::learned;
    std::uint64_t seed = 1;
};

struct RunOutcome {
    RunRecord record;
    Network net;
    TrainTrace trace;
};

/// One QAT run from the shared float network.
inline RunOutcome run_single(const ExperimentConfig& cfg, const Network& pretrained, const DataSplit& data, const RunSpec& spec) {
    const auto t0 = std::chrono::steady_clock::now();
    QuantPlan plan{spec.bits.weights, spec.bits.activations, spec.config};
    plan.grad_scale = cfg.grad_scale;
    TrainConfig tc = cfg.qat;
    tc.seed = spec.seed;
    std::optional<OffsetMode> fixed;
    if (spec.offset_mode != OffsetMode::learned) fixed = spec.offset_mode;
    QatResult r = train_qat(pretrained, data, plan, tc, spec.scheme, cfg.calibration, fixed);
    const auto t1 = std::chrono::steady_clock::now();

    RunRecord rec;
    rec.experiment = std::string(experiment_kind_name(cfg.kind));
    rec.dataset = cfg.dataset;
    rec.architecture = cfg.architecture;
    rec.bits = spec.bits;
    rec.config = spec.config;
    rec.scheme = std::string(init_scheme_name(spec.scheme));
    rec.offset_mode = std::string(offset_mode_name(spec.offset_mode));
    rec.seed = spec.seed;
    rec.final_val_acc = r.trace.final_val_acc();
    for (const auto& e : r.trace.epochs) rec.best_val_acc = std::max(rec.best_val_acc, e.val_acc);
    rec.layers = collect_layer_params(r.net);
    rec.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
    return {std::move(rec), std::move(r.net), std::move(r.trace)};
}

/// Runs every spec; outcome i belongs to spec i regardless of completion order.
inline std::vector<RunOutcome> run_all(const ExperimentConfig& cfg, const Network& pretrained, const DataSplit& data,
                                       const std::vector<RunSpec>& specs) {
    std::vector<std::optional<RunOutcome>> slots(specs.size());
    parallel_for(specs.size(), cfg.jobs, [&](std::size_t i) { slots[i] = run_single(cfg, pretrained, data, specs[i]); });
    std::vector<RunOutcome> out;
    out.reserve(specs.size());
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

inline std::vector<RunRecord> records_of(const std::vector<RunOutcome>& outcomes) {
    std::vector<RunRecord> out;
    for (const auto& o : outcomes) out.push_back(o.record);
    return out;
}

/// Float network shared by every run of a study: loaded from cfg.checkpoint when set
/// (a missing file is an error), otherwise pretrained with cfg.pretrain.
inline Network shared_float_network(const ExperimentConfig& cfg, const DataSplit& data, TrainTrace* trace = nullptr) {
    if (!cfg.checkpoint.empty()) {
        if (!std::filesystem::exists(cfg.checkpoint)) {
            throw std::runtime_error("float checkpoint '" + cfg.checkpoint + "' does not exist");
        }
        Network net = load_checkpoint(cfg.checkpoint);
        if (net.has_quantizers()) net = net.without_quantizers();
        return net;
    }
    TrainConfig tc = cfg.pretrain;
    tc.seed = cfg.pretrain_seed;
    return pretrain_float(make_architecture(cfg.architecture, data.train), data, tc, trace);
}

/// Every (bits, config, seed) cell, with the first listed init scheme.
inline std::vector<RunSpec> config_sweep_specs(const ExperimentConfig& cfg) {
    std::vector<RunSpec> specs;
    for (const auto& b : cfg.bits)
        for (int c : cfg.configs)
            for (auto seed : cfg.seeds) specs.push_back({b, c, cfg.schemes.front(), OffsetMode::learned, seed});
    return specs;
}

/// Every (bits, scheme, seed) cell; the configuration is the first listed (Config 4 by convention).
inline std::vector<RunSpec> init_stability_specs(const ExperimentConfig& cfg) {
    std::vector<RunSpec> specs;
    for (const auto& b : cfg.bits)
        for (auto scheme : cfg.schemes)
            for (auto seed : cfg.seeds) specs.push_back({b, cfg.configs.front(), scheme, OffsetMode::learned, seed});
    return specs;
}

/// Every (bits, offset mode, seed) cell on the first listed offset-enabled configuration.
inline std::vector<RunSpec> fixed_offset_specs(const ExperimentConfig& cfg) {
    int config = 0;
    for (int c : cfg.configs) {
        if (table_config(c, 4).offset_enabled) {
            config = c;
            break;
        }
    }
    if (config == 0) throw std::invalid_argument("fixed_offset: no offset-enabled configuration in the sweep");
    std::vector<RunSpec> specs;
    for (const auto& b : cfg.bits)
        for (auto mode : cfg.offset_modes)
            for (auto seed : cfg.seeds) specs.push_back({b, config, cfg.schemes.front(), mode, seed});
    return specs;
}

inline std::vector<RunRecord> run_config_sweep(const ExperimentConfig& cfg, const Network& pretrained, const DataSplit& data) {
    cfg.validate();
    return records_of(run_all(cfg, pretrained, data, config_sweep_specs(cfg)));
}

struct StabilityRow {
    std::string scheme;
    BitWidths bits;
    AccuracyStats stats;
};

inline std::vector<StabilityRow> stability_rows(std::span<const RunRecord> records) {
    std::vector<StabilityRow> rows;
    for (const auto& [k, s] : summarize(records)) rows.push_back({k.scheme, k.bits, s});
    return rows;
}

inline std::vector<RunRecord> run_init_stability(const ExperimentConfig& cfg, const Network& pretrained, const DataSplit& data) {
    cfg.validate();
    if (cfg.seeds.size() < 2) throw std::invalid_argument("init_stability: needs at least 2 seeds");
    return records_of(run_all(cfg, pretrained, data, init_stability_specs(cfg)));
}

inline std::vector<RunRecord> run_fixed_offset(const ExperimentConfig& cfg, const Network& pretrained, const DataSplit& data) {
    cfg.validate();
    return records_of(run_all(cfg, pretrained, data, fixed_offset_specs(cfg)));
}

// ---------------------------------------------------------------------------
// Per-layer offset report
// ---------------------------------------------------------------------------

struct BetaRow {
    std::string layer;
    std::string activation;
    float beta = 0.0f;
    float x_min = 0.0f;
    bool below_min = false;  ///< β < x_min
};

struct BetaReport {
    std::vector<BetaRow> rows;
    std::size_t negative = 0;
    bool majority_negative() const { return 2 * negative > rows.size(); }
    std::size_t flagged() const {
        return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const BetaRow& r) { return r.below_min; }));
    }
};

/// Learned offsets of every activation quantizer next to the minimum of that
/// quantizer's input on the float-path calibration data. `x_min` per site comes from
/// `estimate_activation_range` over `batches`.
inline BetaReport run_beta_report(const Network& net, std::span<const Tensor> batches) {
    BetaReport report;
    std::vector<const Layer*> act_layers;
    for (const auto& l : net.layers())
        if (l.act_q && l.act_q->config.offset_enabled) act_layers.push_back(&l);
    if (act_layers.empty()) throw std::invalid_argument("beta report: network has no offsets");
    auto ranges = estimate_activation_range(net, batches);
    const std::size_t first = net.input_quantizer() ? 1 : 0;
    std::size_t site = first;
    for (const auto& l : net.layers()) {
        if (!l.act_q) continue;
        const Quantizer& q = *l.act_q;
        if (q.config.offset_enabled) {
            BetaRow row{q.name, std::string(activation_name(l.spec.activation)), q.offset.item(), ranges.at(site).min, false};
            row.below_min = row.beta < row.x_min;
            if (row.beta < 0.0f) ++report.negative;
            report.rows.push_back(row);
        }
        ++site;
    }
    return report;
}

inline void write_beta_csv(std::ostream& os, const BetaReport& report) {
    os << "layer,activation,beta,x_min,beta_below_x_min\n";
    for (const auto& r : report.rows) {
        os << r.layer << ',' << r.activation << ',' << detail::format_float(r.beta) << ',' << detail::format_float(r.x_min) << ','
           << (r.below_min ? 1 : 0) << '\n';
    }
}

/// Bar chart of β per layer with x_min markers.
inline void write_beta_svg(std::ostream& os, const BetaReport& report) {
    const double width = 80.0 + 60.0 * static_cast<double>(report.rows.size());
    const double height = 320.0, top = 30.0, bottom = 270.0;
    double lo = 0.0, hi = 0.0;
    for (const auto& r : report.rows) {
        lo = std::min({lo, static_cast<double>(r.beta), static_cast<double>(r.x_min)});
        hi = std::max({hi, static_cast<double>(r.beta), static_cast<double>(r.x_min)});
    }
    if (hi - lo < 1e-6) hi = lo + 1.0;
    const double pad = 0.1 * (hi - lo);
    lo -= pad;
    hi += pad;
    auto y_of = [&](double v) { return top + (hi - v) / (hi - lo) * (bottom - top); };
    os << std::fixed << std::setprecision(2);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    os << "<text x=\"10\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">Learned offset per layer (bars) and x_min (red)</text>\n";
    os << "<line x1=\"50\" x2=\"" << width - 10 << "\" y1=\"" << y_of(0.0) << "\" y2=\"" << y_of(0.0)
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"5\" y=\"" << y_of(hi) + 4 << "\" font-size=\"10\">" << hi << "</text>\n";
    os << "<text x=\"5\" y=\"" << y_of(lo) + 4 << "\" font-size=\"10\">" << lo << "</text>\n";
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        const auto& r = report.rows[i];
        const double x = 60.0 + 60.0 * static_cast<double>(i);
        const double y0 = y_of(0.0), y1 = y_of(r.beta);
        os << "<rect x=\"" << x << "\" y=\"" << std::min(y0, y1) << "\" width=\"36\" height=\"" << std::abs(y1 - y0)
           << "\" fill=\"" << (r.below_min ? "orange" : "steelblue") << "\"/>\n";
        os << "<line x1=\"" << x - 4 << "\" x2=\"" << x + 40 << "\" y1=\"" << y_of(r.x_min) << "\" y2=\"" << y_of(r.x_min)
           << "\" stroke=\"red\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << x << "\" y=\"" << bottom + 20 << "\" font-size=\"10\">" << r.layer << "</text>\n";
    }
    os << "</svg>\n";
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

inline void write_text_file(const std::filesystem::path& path, const std::function<void(std::ostream&)>& fn) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    fn(os);
    if (!os) throw std::runtime_error("error writing '" + path.string() + "'");
}

}  // namespace asymq
