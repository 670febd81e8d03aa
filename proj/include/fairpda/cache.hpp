#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fairpda/cohort.hpp"
#include "fairpda/dsp.hpp"
#include "fairpda/features.hpp"
#include "fairpda/tensor.hpp"

namespace fairpda {

struct SegmentMeta {
    std::string patient_id;
    std::string recording_id;
    int segment_index = 0;
    ClassLabel label = ClassLabel::HC;
    Gender gender = Gender::M;
    std::string dataset_id;
    bool clipped_gain = false;

    std::string file_name() const {
        return recording_id + "_" + std::to_string(segment_index) + ".fpda";
    }
};

// Segment-level feature cache: one FPDA tensor file per segment plus a
// sidecar JSON index carrying provenance metadata and the prep settings
// that produced the cache.
class FeatureCache {
public:
    explicit FeatureCache(std::string dir) : dir_(std::move(dir)) {}

    const std::string& dir() const { return dir_; }
    std::vector<SegmentMeta>& entries() { return entries_; }
    const std::vector<SegmentMeta>& entries() const { return entries_; }

    void set_provenance(const nlohmann::json& j) { provenance_ = j; }
    const nlohmann::json& provenance() const { return provenance_; }

    std::string path_for(const SegmentMeta& m) const {
        return (std::filesystem::path(dir_) / m.file_name()).string();
    }

    bool has_file(const SegmentMeta& m) const {
        return std::filesystem::exists(path_for(m));
    }

    void write_segment(const SegmentMeta& m, const Tensor& t) {
        std::filesystem::create_directories(dir_);
        tensorio::save_tensor_file(path_for(m), t, tensorio::kDtypeF32);
        entries_.push_back(m);
    }

    Tensor load_segment(const SegmentMeta& m) const {
        const auto p = path_for(m);
        if (!std::filesystem::exists(p))
            throw IoError("feature cache: missing segment file " + p);
        return tensorio::load_tensor_file(p);
    }

    void save_index() const {
        std::filesystem::create_directories(dir_);
        nlohmann::json idx;
        idx["provenance"] = provenance_;
        idx["resampler"] = dsp::kResamplerVersion;
        nlohmann::json segs = nlohmann::json::array();
        for (const auto& m : entries_) {
            segs.push_back({{"file", m.file_name()},
                            {"patient_id", m.patient_id},
                            {"recording_id", m.recording_id},
                            {"segment_index", m.segment_index},
                            {"label", to_string(m.label)},
                            {"gender", to_string(m.gender)},
                            {"dataset_id", m.dataset_id},
                            {"clipped_gain_flag", m.clipped_gain}});
        }
        idx["segments"] = segs;
        std::ofstream os((std::filesystem::path(dir_) / "index.json").string());
        if (!os) throw IoError("feature cache: cannot write index in " + dir_);
        os << idx.dump(2) << "\n";
    }

    static FeatureCache load(const std::string& dir) {
        const auto idx_path = (std::filesystem::path(dir) / "index.json").string();
        std::ifstream is(idx_path);
        if (!is) throw IoError("feature cache: missing index " + idx_path);
        nlohmann::json idx;
        is >> idx;
        FeatureCache cache(dir);
        cache.provenance_ = idx.value("provenance", nlohmann::json::object());
        for (const auto& s : idx.at("segments")) {
            SegmentMeta m;
            m.patient_id = s.at("patient_id").get<std::string>();
            m.recording_id = s.at("recording_id").get<std::string>();
            m.segment_index = s.at("segment_index").get<int>();
            m.label = parse_class_label(s.at("label").get<std::string>());
            m.gender = parse_gender(s.at("gender").get<std::string>());
            m.dataset_id = s.at("dataset_id").get<std::string>();
            m.clipped_gain = s.at("clipped_gain_flag").get<bool>();
            cache.entries_.push_back(std::move(m));
        }
        return cache;
    }

private:
    std::string dir_;
    std::vector<SegmentMeta> entries_;
    nlohmann::json provenance_;
};

struct PrepReport {
    size_t recordings_ok = 0;
    size_t recordings_skipped = 0;  // already cached
    size_t recordings_failed = 0;
    std::vector<std::string> failures;
    std::vector<std::string> warnings;
};

// Runs the full prep chain over a manifest: preprocess each recording,
// RMS-equalize against stats, segment, extract features, write cache files.
// Per-recording failures are collected, not fatal. Existing cache files are
// reused (resumable).
inline PrepReport prep_manifest(const CohortManifest& manifest, const std::string& audio_root,
                                const LevelStats& stats, const PrepConfig& prep,
                                const FeatureConfig& fc, FeatureCache& cache) {
    PrepReport report;
    std::map<std::string, const PatientRecord*> by_id;
    for (const auto& p : manifest.patients) by_id[p.patient_id] = &p;

    for (const auto& rec : manifest.recordings) {
        const auto* patient = by_id.at(rec.patient_id);
        try {
            // resumable: if segment 0 exists we assume the recording is done
            SegmentMeta probe;
            probe.recording_id = rec.recording_id;
            probe.segment_index = 0;
            bool already = cache.has_file(probe);
            Wave trimmed;
            dsp::EqualizeResult eq;
            std::vector<std::vector<double>> windows;
            if (!already) {
                const auto path =
                    (std::filesystem::path(audio_root) / rec.audio_path).string();
                const Wave raw = wavio::read(path);
                trimmed = dsp::preprocess_recording(raw, prep);
                eq = dsp::rms_equalize(trimmed.samples, stats.global_target_dbfs);
                windows = dsp::segment(eq.samples, prep);
            } else {
                ++report.recordings_skipped;
            }
            auto make_meta = [&](int idx, bool clipped) {
                SegmentMeta m;
                m.patient_id = rec.patient_id;
                m.recording_id = rec.recording_id;
                m.segment_index = idx;
                m.label = patient->class_label;
                m.gender = patient->gender;
                m.dataset_id = patient->dataset_id;
                m.clipped_gain = clipped;
                return m;
            };
            if (!already) {
                int idx = 0;
                for (const auto& w : windows)
                    cache.write_segment(make_meta(idx++, eq.clipped_gain),
                                        feat::extract(w, prep.target_sr_hz, fc));
                ++report.recordings_ok;
            } else {
                // re-register the existing segment files so a resumed prep
                // still produces a complete index (clipped flag not
                // recoverable from the tensor files alone)
                for (int idx = 0;; ++idx) {
                    SegmentMeta m = make_meta(idx, false);
                    if (!cache.has_file(m)) break;
                    cache.entries().push_back(m);
                }
            }
        } catch (const std::exception& e) {
            ++report.recordings_failed;
            report.failures.push_back(rec.recording_id + ": " + e.what());
        }
    }
    return report;
}

}  // namespace fairpda
