#pragma once

#include "ehdr/events.hpp"
#include "ehdr/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ehdr {

// Ordered sharp frames in linear radiance with uniformly spaced timestamps.
struct SharpSequence {
    std::vector<Tensor<double>> frames; // each (3,h,w), values >= 0
    std::vector<double> timestamps;     // seconds, strictly increasing
};

enum class Crf { linear, gamma };

struct SimulatorConfig {
    double contrast = 0.2;   // log-intensity threshold
    double log_eps = 1e-3;   // floor before log()
    double framerate = 150.0;
    double refractory = 0.0; // seconds
};

// Exposure tags and their normalization factors (EV-2, EV+0, EV+2).
inline constexpr int kExposureTags[3] = {-2, 0, 2};
inline constexpr double kExposureGain[3] = {1.0, 4.0, 16.0};

inline int exposure_index(int ev) {
    switch (ev) {
        case -2: return 0;
        case 0: return 1;
        case 2: return 2;
        default: throw std::invalid_argument("unknown exposure tag");
    }
}

struct ExposureStack {
    Tensor<double> s_minus2, s_plus0, s_plus2; // LDR in [0,1]
    const Tensor<double>& by_tag(int ev) const {
        switch (ev) {
            case -2: return s_minus2;
            case 0: return s_plus0;
            default: return s_plus2;
        }
    }
};

// Contrast-threshold event simulation on log intensity. Luminance is the
// Rec.601 weighted sum of linear RGB; crossings of k*C from the per-pixel
// reference level are located by exact linear interpolation between frames.
EventStream simulate_events(const SharpSequence& seq, const SimulatorConfig& cfg);

// Mean of exactly 13 linear-radiance frames, then the EV+0 response.
Tensor<double> synthesize_blur(const std::vector<Tensor<double>>& window, Crf crf,
                               double gamma = 2.2);

// LDR = clip(hdr * gain, 0, 1), optionally gamma-encoded.
Tensor<double> decompose_exposure(const Tensor<double>& hdr, int ev, Crf crf, double gamma = 2.2);
ExposureStack decompose_stack(const Tensor<double>& hdr, Crf crf, double gamma = 2.2);

// ---------------------------------------------------------------------------
// corpus

struct CorpusSequence {
    SharpSequence seq;
    bool static_scene = true;  // global camera motion only
    std::string split = "train";
};

struct CorpusConfig {
    SimulatorConfig sim;
    Crf crf = Crf::linear;
    double gamma = 2.2;
    int stride = 1;
    bool store_eval_hdr = true;
};

struct SampleRef {
    std::string path; // relative to corpus root
    std::string split;
    bool static_scene = true;
    double t0 = 0.0;
    double t1 = 0.0;
};

struct CorpusManifest {
    std::vector<SampleRef> samples;
    uint64_t seed = 0;
    double framerate = 0.0;
};

// Sliding 13-frame windows, one sample per window. The observation exposure
// cycles -2 -> +0 -> +2 with the global sample index; the observed frame
// within the window is drawn from the corpus RNG. Deterministic given seed.
CorpusManifest build_corpus(const std::vector<CorpusSequence>& seqs, const CorpusConfig& cfg,
                            const std::string& out_dir, uint64_t seed);

void write_manifest(const CorpusManifest& m, const std::string& path);
CorpusManifest read_manifest(const std::string& path);

struct TrainingSample {
    Tensor<double> blur; // (3,h,w) LDR in [0,1]
    EventStream events;  // within [t0,t1]
    double obs_time = 0.0;
    Tensor<double> obs;  // (3,h,w) LDR in [0,1]
    int obs_ev = 0;      // -2, 0, +2
    std::optional<Tensor<float>> eval_hdr;
    double t0 = 0.0;
    double t1 = 0.0;
    bool static_scene = true;
};

TrainingSample load_sample(const std::string& corpus_root, const SampleRef& ref);

// Procedural scenes for tests and demos: a smooth radiance gradient plus
// moving Gaussian blobs whose peaks exceed the EV+0 clipping point, under
// either global (camera) or per-blob (dynamic) motion.
SharpSequence make_toy_sequence(uint64_t seed, int h, int w, int n_frames, double fps,
                                bool global_motion_only);

} // namespace ehdr
