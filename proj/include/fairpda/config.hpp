#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "fairpda/dsp.hpp"
#include "fairpda/features.hpp"
#include "fairpda/trainer.hpp"

namespace fairpda {

// Minimal INI reader: [section] headers, key = value pairs, '#' or ';'
// comments, whitespace-trimmed. Unknown keys are rejected at mapping time so
// typos fail loudly instead of silently using defaults.
class IniFile {
public:
    static IniFile parse(std::istream& in, const std::string& origin = "<stream>") {
        IniFile f;
        std::string line, section;
        size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string t = trim(strip_comment(line));
            if (t.empty()) continue;
            if (t.front() == '[') {
                if (t.back() != ']')
                    throw ValidationError(origin + ":" + std::to_string(lineno) +
                                          ": malformed section header");
                section = trim(t.substr(1, t.size() - 2));
                if (section.empty())
                    throw ValidationError(origin + ":" + std::to_string(lineno) +
                                          ": empty section name");
                continue;
            }
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw ValidationError(origin + ":" + std::to_string(lineno) +
                                      ": expected key = value");
            const std::string key = trim(t.substr(0, eq));
            const std::string val = trim(t.substr(eq + 1));
            if (key.empty())
                throw ValidationError(origin + ":" + std::to_string(lineno) + ": empty key");
            f.values_[section + "." + key] = val;
        }
        return f;
    }

    static IniFile load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config file: " + path);
        return parse(in, path);
    }

    bool has(const std::string& section, const std::string& key) const {
        return values_.count(section + "." + key) > 0;
    }
    std::string get(const std::string& section, const std::string& key) const {
        auto it = values_.find(section + "." + key);
        if (it == values_.end())
            throw ValidationError("config: missing key [" + section + "] " + key);
        return it->second;
    }
    const std::map<std::string, std::string>& values() const { return values_; }

private:
    static std::string strip_comment(const std::string& s) {
        const auto pos = s.find_first_of("#;");
        return pos == std::string::npos ? s : s.substr(0, pos);
    }
    static std::string trim(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return "";
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    }

    std::map<std::string, std::string> values_;
};

// Everything a run needs, with every default spelled out. The INI file and
// CLI flags both write into this struct (flags win).
struct RunConfig {
    // [data]
    std::string manifest_path;
    std::string cache_dir;
    std::string run_dir = "runs/default";
    int cv_folds = 5;
    double uda_fraction = 0.3;
    int min_age = 34;
    int max_age = 80;

    // [prep]
    PrepConfig prep;
    FeatureConfig features;

    // [model]
    BackboneConfig backbone;
    HeadsConfig heads;
    AlignMode align_mode = AlignMode::partial_cdan;

    // [train]
    TrainProtocol::Mode mode = TrainProtocol::Mode::UDA;
    bool patient_norm = true;
    bool no_warmup = false;
    bool no_mixstyle = false;
    bool no_fairness = false;
    int epochs = 8;
    size_t batch_size = 16;
    double learning_rate = 1e-3;
    double lambda_d_max = 0.3;
    double lambda_fair_max = 0.3;
    double warmup_fraction = 0.2;
    uint64_t seed = 0;

    // [eval]
    size_t permutation_resamples = 10000;
    std::string gap_reduction = "macro";  // or "per_class_max"

    TrainProtocol protocol() const {
        TrainProtocol p;
        p.mode = mode;
        p.patient_norm = patient_norm;
        p.align_mode = align_mode;
        p.no_warmup = no_warmup;
        p.no_mixstyle = no_mixstyle;
        p.no_fairness = no_fairness;
        p.window_s = prep.window_s;
        p.epochs = epochs;
        p.batch_size = batch_size;
        p.learning_rate = learning_rate;
        p.lambda_d_max = lambda_d_max;
        p.lambda_fair_max = lambda_fair_max;
        p.warmup_fraction = warmup_fraction;
        p.seed = seed;
        p.backbone = backbone;
        p.heads = heads;
        return p;
    }

    void validate() const {
        if (cv_folds < 2) throw ValidationError("config: cv_folds must be >= 2");
        if (uda_fraction <= 0.0 || uda_fraction >= 1.0)
            throw ValidationError("config: uda_fraction must be in (0,1)");
        if (epochs < 1) throw ValidationError("config: epochs must be >= 1");
        if (batch_size < 2) throw ValidationError("config: batch_size must be >= 2");
        if (learning_rate <= 0.0) throw ValidationError("config: learning_rate must be > 0");
        if (lambda_d_max < 0.0 || lambda_fair_max < 0.0)
            throw ValidationError("config: lambda maxima must be >= 0");
        if (warmup_fraction < 0.0 || warmup_fraction > 1.0)
            throw ValidationError("config: warmup_fraction must be in [0,1]");
        if (gap_reduction != "macro" && gap_reduction != "per_class_max")
            throw ValidationError("config: gap_reduction must be macro or per_class_max");
        backbone.validate();
        prep.validate();
        features.validate();
    }
};

namespace detail {
inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ValidationError("config: key '" + key + "' expects a boolean, got '" + v + "'");
}
template <typename T>
inline T parse_num(const std::string& v, const std::string& key) {
    std::istringstream ss(v);
    T out{};
    ss >> out;
    if (ss.fail() || !ss.eof())
        throw ValidationError("config: key '" + key + "' has invalid value '" + v + "'");
    return out;
}
}  // namespace detail

inline RunConfig apply_ini(RunConfig cfg, const IniFile& ini) {
    using detail::parse_bool;
    using detail::parse_num;
    for (const auto& [full_key, val] : ini.values()) {
        const auto dot = full_key.find('.');
        const std::string sec = full_key.substr(0, dot);
        const std::string key = full_key.substr(dot + 1);
        if (sec == "data") {
            if (key == "manifest") cfg.manifest_path = val;
            else if (key == "cache_dir") cfg.cache_dir = val;
            else if (key == "run_dir") cfg.run_dir = val;
            else if (key == "cv_folds") cfg.cv_folds = parse_num<int>(val, full_key);
            else if (key == "uda_fraction") cfg.uda_fraction = parse_num<double>(val, full_key);
            else if (key == "min_age") cfg.min_age = parse_num<int>(val, full_key);
            else if (key == "max_age") cfg.max_age = parse_num<int>(val, full_key);
            else throw ValidationError("config: unknown key [data] " + key);
        } else if (sec == "prep") {
            if (key == "target_sr") cfg.prep.target_sr_hz = parse_num<int>(val, full_key);
            else if (key == "window_s") cfg.prep.window_s = parse_num<double>(val, full_key);
            else if (key == "overlap") cfg.prep.overlap = parse_num<double>(val, full_key);
            else if (key == "pad_mode") cfg.prep.pad_mode = parse_pad_mode(val);
            else if (key == "vad_threshold_db")
                cfg.prep.vad_threshold_db = parse_num<double>(val, full_key);
            else if (key == "feature") cfg.features.kind = parse_feature_kind(val);
            else if (key == "n_mels") cfg.features.n_mels = parse_num<int>(val, full_key);
            else if (key == "n_mfcc") cfg.features.n_mfcc = parse_num<int>(val, full_key);
            else throw ValidationError("config: unknown key [prep] " + key);
        } else if (sec == "model") {
            if (key == "backbone") {
                if (val == "tiny") cfg.backbone.variant = BackboneConfig::Variant::tiny;
                else if (val == "resnet18") {
                    cfg.backbone.variant = BackboneConfig::Variant::resnet18;
                    cfg.backbone.feature_dim = 512;
                } else throw ValidationError("config: unknown backbone '" + val + "'");
            }
            else if (key == "feature_dim") cfg.backbone.feature_dim = parse_num<int>(val, full_key);
            else if (key == "mixstyle_alpha")
                cfg.backbone.mixstyle_alpha = parse_num<double>(val, full_key);
            else if (key == "mixstyle_p_apply")
                cfg.backbone.mixstyle_p_apply = parse_num<double>(val, full_key);
            else if (key == "align_mode") cfg.align_mode = parse_align_mode(val);
            else throw ValidationError("config: unknown key [model] " + key);
        } else if (sec == "train") {
            if (key == "mode") {
                if (val == "DG" || val == "dg") cfg.mode = TrainProtocol::Mode::DG;
                else if (val == "UDA" || val == "uda") cfg.mode = TrainProtocol::Mode::UDA;
                else throw ValidationError("config: unknown train mode '" + val + "'");
            }
            else if (key == "loss_mode") {
                if (val == "ce") cfg.patient_norm = false;
                else if (val == "ce_pn") cfg.patient_norm = true;
                else throw ValidationError("config: loss_mode must be ce or ce_pn");
            }
            else if (key == "no_warmup") cfg.no_warmup = parse_bool(val, full_key);
            else if (key == "no_mixstyle") cfg.no_mixstyle = parse_bool(val, full_key);
            else if (key == "no_fairness") cfg.no_fairness = parse_bool(val, full_key);
            else if (key == "epochs") cfg.epochs = parse_num<int>(val, full_key);
            else if (key == "batch_size") cfg.batch_size = parse_num<size_t>(val, full_key);
            else if (key == "learning_rate")
                cfg.learning_rate = parse_num<double>(val, full_key);
            else if (key == "lambda_d_max") cfg.lambda_d_max = parse_num<double>(val, full_key);
            else if (key == "lambda_fair_max")
                cfg.lambda_fair_max = parse_num<double>(val, full_key);
            else if (key == "warmup_fraction")
                cfg.warmup_fraction = parse_num<double>(val, full_key);
            else if (key == "seed") cfg.seed = parse_num<uint64_t>(val, full_key);
            else throw ValidationError("config: unknown key [train] " + key);
        } else if (sec == "eval") {
            if (key == "permutation_resamples")
                cfg.permutation_resamples = parse_num<size_t>(val, full_key);
            else if (key == "gap_reduction") cfg.gap_reduction = val;
            else throw ValidationError("config: unknown key [eval] " + key);
        } else {
            throw ValidationError("config: unknown section [" + sec + "]");
        }
    }
    return cfg;
}

// Config echo written into the run directory so a run is reproducible from
// its artifacts alone.
inline nlohmann::json config_echo(const RunConfig& c) {
    return {
        {"data",
         {{"manifest", c.manifest_path}, {"cache_dir", c.cache_dir}, {"run_dir", c.run_dir},
          {"cv_folds", c.cv_folds}, {"uda_fraction", c.uda_fraction},
          {"min_age", c.min_age}, {"max_age", c.max_age}}},
        {"prep",
         {{"target_sr", c.prep.target_sr_hz}, {"window_s", c.prep.window_s},
          {"overlap", c.prep.overlap}, {"pad_mode", to_string(c.prep.pad_mode)},
          {"vad_threshold_db", c.prep.vad_threshold_db},
          {"feature", to_string(c.features.kind)}, {"n_mels", c.features.n_mels},
          {"n_mfcc", c.features.n_mfcc}, {"resampler", dsp::kResamplerVersion}}},
        {"model",
         {{"backbone",
           c.backbone.variant == BackboneConfig::Variant::tiny ? "tiny" : "resnet18"},
          {"feature_dim", c.backbone.feature_dim},
          {"mixstyle_alpha", c.backbone.mixstyle_alpha},
          {"mixstyle_p_apply", c.backbone.mixstyle_p_apply},
          {"align_mode", to_string(c.align_mode)}}},
        {"train",
         {{"mode", c.mode == TrainProtocol::Mode::DG ? "DG" : "UDA"},
          {"loss_mode", c.patient_norm ? "ce_pn" : "ce"}, {"no_warmup", c.no_warmup},
          {"no_mixstyle", c.no_mixstyle}, {"no_fairness", c.no_fairness},
          {"epochs", c.epochs}, {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate}, {"lambda_d_max", c.lambda_d_max},
          {"lambda_fair_max", c.lambda_fair_max}, {"warmup_fraction", c.warmup_fraction},
          {"seed", c.seed}}},
        {"eval",
         {{"permutation_resamples", c.permutation_resamples},
          {"gap_reduction", c.gap_reduction}}}};
}

}  // namespace fairpda
