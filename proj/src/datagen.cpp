#include "ehdr/datagen.hpp"

#include "ehdr/image_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

namespace fs = std::filesystem;
using nlohmann::json;

namespace ehdr {

namespace {

void check_sequence(const SharpSequence& seq, size_t min_frames) {
    if (seq.frames.size() < min_frames)
        throw std::invalid_argument("sequence too short: need at least " +
                                    std::to_string(min_frames) + " frames");
    if (seq.timestamps.size() != seq.frames.size())
        throw std::invalid_argument("frame/timestamp count mismatch");
    for (size_t i = 0; i + 1 < seq.timestamps.size(); ++i)
        if (!(seq.timestamps[i + 1] > seq.timestamps[i]))
            throw std::invalid_argument("timestamps must be strictly increasing");
    for (const auto& f : seq.frames) {
        if (f.ndim() != 3 || !f.same_shape(seq.frames[0]))
            throw std::invalid_argument("all frames must share one (3,h,w) shape");
        if (f.min() < 0.0) throw std::invalid_argument("negative radiance in frame");
    }
}

double rec601_luma(const Tensor<double>& rgb, int y, int x) {
    return 0.299 * rgb.at(0, y, x) + 0.587 * rgb.at(1, y, x) + 0.114 * rgb.at(2, y, x);
}

} // namespace

EventStream simulate_events(const SharpSequence& seq, const SimulatorConfig& cfg) {
    check_sequence(seq, 2);
    if (cfg.contrast <= 0.0) throw std::invalid_argument("contrast threshold must be > 0");
    const int h = seq.frames[0].dim(1);
    const int w = seq.frames[0].dim(2);
    const size_t nf = seq.frames.size();

    // per-pixel log-intensity track
    std::vector<double> logi(nf);
    EventStream out;
    out.width = w;
    out.height = h;
    out.t_start = seq.timestamps.front();
    out.t_end = seq.timestamps.back();

    const double C = cfg.contrast;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (size_t k = 0; k < nf; ++k)
                logi[k] = std::log(std::max(rec601_luma(seq.frames[k], y, x), cfg.log_eps));
            double ref = logi[0];
            double last_t = -std::numeric_limits<double>::infinity();
            for (size_t k = 0; k + 1 < nf; ++k) {
                const double ta = seq.timestamps[k], tb = seq.timestamps[k + 1];
                const double va = logi[k], vb = logi[k + 1];
                if (vb == va) continue;
                const double slope = (vb - va) / (tb - ta);
                // walk crossings of ref +- C in order within this interval
                while (true) {
                    const double level = vb > va ? ref + C : ref - C;
                    const bool crossed = vb > va ? (vb >= level) : (vb <= level);
                    if (!crossed) break;
                    const double tc = ta + (level - va) / slope;
                    ref = level;
                    if (tc >= last_t + cfg.refractory) {
                        out.events.push_back({static_cast<uint16_t>(x), static_cast<uint16_t>(y),
                                              tc, static_cast<int8_t>(vb > va ? 1 : -1)});
                        last_t = tc;
                    }
                }
            }
        }
    }
    std::stable_sort(out.events.begin(), out.events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });
    return out;
}

Tensor<double> synthesize_blur(const std::vector<Tensor<double>>& window, Crf crf, double gamma) {
    if (window.size() != 13)
        throw std::invalid_argument("blur synthesis needs exactly 13 frames");
    for (const auto& f : window) {
        if (!f.same_shape(window[0])) throw std::invalid_argument("frame shape mismatch");
        if (f.min() < 0.0) throw std::invalid_argument("negative radiance in frame");
    }
    Tensor<double> mean(window[0].shape());
    for (const auto& f : window)
        for (int64_t i = 0; i < mean.numel(); ++i) mean[i] += f[i];
    for (int64_t i = 0; i < mean.numel(); ++i) mean[i] /= 13.0;
    return decompose_exposure(mean, 0, crf, gamma);
}

Tensor<double> decompose_exposure(const Tensor<double>& hdr, int ev, Crf crf, double gamma) {
    if (hdr.min() < 0.0) throw std::invalid_argument("negative radiance");
    const double g = kExposureGain[exposure_index(ev)];
    Tensor<double> ldr(hdr.shape());
    for (int64_t i = 0; i < hdr.numel(); ++i) {
        double v = std::min(hdr[i] * g, 1.0);
        if (crf == Crf::gamma) v = std::pow(v, 1.0 / gamma);
        ldr[i] = v;
    }
    return ldr;
}

ExposureStack decompose_stack(const Tensor<double>& hdr, Crf crf, double gamma) {
    return {decompose_exposure(hdr, -2, crf, gamma), decompose_exposure(hdr, 0, crf, gamma),
            decompose_exposure(hdr, 2, crf, gamma)};
}

// ---------------------------------------------------------------------------

CorpusManifest build_corpus(const std::vector<CorpusSequence>& seqs, const CorpusConfig& cfg,
                            const std::string& out_dir, uint64_t seed) {
    if (seqs.empty()) throw std::invalid_argument("build_corpus: no sequences");
    for (const auto& s : seqs) check_sequence(s.seq, 13);
    fs::create_directories(out_dir);

    std::mt19937_64 rng(seed);
    CorpusManifest manifest;
    manifest.seed = seed;
    if (seqs[0].seq.timestamps.size() >= 2)
        manifest.framerate = 1.0 / (seqs[0].seq.timestamps[1] - seqs[0].seq.timestamps[0]);

    int sample_idx = 0;
    for (const auto& cs : seqs) {
        const auto& seq = cs.seq;
        const int n = static_cast<int>(seq.frames.size());
        for (int w0 = 0; w0 + 13 <= n; w0 += cfg.stride) {
            SharpSequence window;
            window.frames.assign(seq.frames.begin() + w0, seq.frames.begin() + w0 + 13);
            window.timestamps.assign(seq.timestamps.begin() + w0,
                                     seq.timestamps.begin() + w0 + 13);

            const int obs_frame = static_cast<int>(rng() % 13);
            const int ev = kExposureTags[sample_idx % 3];

            char name[16];
            std::snprintf(name, sizeof(name), "s%06d", sample_idx);
            const fs::path dir = fs::path(out_dir) / name;
            fs::create_directories(dir);

            write_png((dir / "blur.png").string(),
                      synthesize_blur(window.frames, cfg.crf, cfg.gamma));
            write_events((dir / "events.bin").string(), simulate_events(window, cfg.sim));

            const Tensor<double>& sharp = window.frames[obs_frame];
            write_png((dir / "obs.png").string(), decompose_exposure(sharp, ev, cfg.crf, cfg.gamma));
            {
                std::ofstream meta(dir / "obs.meta");
                char evtag[4];
                std::snprintf(evtag, sizeof(evtag), "%+d", ev);
                meta.precision(17);
                meta << window.timestamps[static_cast<size_t>(obs_frame)] << " " << evtag << "\n";
            }
            if (cfg.store_eval_hdr) write_pfm((dir / "gt_hdr.pfm").string(), sharp);

            manifest.samples.push_back({name, cs.split, cs.static_scene,
                                        window.timestamps.front(), window.timestamps.back()});
            ++sample_idx;
        }
    }
    write_manifest(manifest, (fs::path(out_dir) / "manifest.json").string());
    return manifest;
}

void write_manifest(const CorpusManifest& m, const std::string& path) {
    json j;
    j["seed"] = m.seed;
    j["framerate"] = m.framerate;
    j["samples"] = json::array();
    for (const auto& s : m.samples) {
        j["samples"].push_back({{"path", s.path},
                                {"split", s.split},
                                {"static", s.static_scene},
                                {"t0", s.t0},
                                {"t1", s.t1}});
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_manifest: cannot open " + path);
    out << j.dump(2) << "\n";
}

CorpusManifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_manifest: cannot open " + path);
    json j = json::parse(in);
    CorpusManifest m;
    m.seed = j.value("seed", 0ull);
    m.framerate = j.value("framerate", 0.0);
    for (const auto& s : j.at("samples")) {
        m.samples.push_back({s.at("path").get<std::string>(), s.at("split").get<std::string>(),
                             s.at("static").get<bool>(), s.at("t0").get<double>(),
                             s.at("t1").get<double>()});
    }
    return m;
}

TrainingSample load_sample(const std::string& corpus_root, const SampleRef& ref) {
    const fs::path dir = fs::path(corpus_root) / ref.path;
    TrainingSample s;
    s.blur = read_png((dir / "blur.png").string());
    s.events = read_events((dir / "events.bin").string());
    s.events.t_start = ref.t0;
    s.events.t_end = ref.t1;
    s.obs = read_png((dir / "obs.png").string());
    {
        std::ifstream meta(dir / "obs.meta");
        std::string evtag;
        if (!(meta >> s.obs_time >> evtag))
            throw std::runtime_error("load_sample: bad obs.meta in " + dir.string());
        s.obs_ev = std::stoi(evtag);
        exposure_index(s.obs_ev); // validates the tag
    }
    if (fs::exists(dir / "gt_hdr.pfm")) s.eval_hdr = read_pfm((dir / "gt_hdr.pfm").string());
    s.t0 = ref.t0;
    s.t1 = ref.t1;
    s.static_scene = ref.static_scene;
    return s;
}

// ---------------------------------------------------------------------------

SharpSequence make_toy_sequence(uint64_t seed, int h, int w, int n_frames, double fps,
                                bool global_motion_only) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    struct Blob {
        double cx, cy, r, peak, vx, vy;
    };
    const int nblobs = 3;
    std::vector<Blob> blobs;
    for (int i = 0; i < nblobs; ++i) {
        Blob b;
        b.cx = uni(rng) * w;
        b.cy = uni(rng) * h;
        b.r = (0.08 + 0.10 * uni(rng)) * std::min(h, w);
        b.peak = 0.25 + 0.55 * uni(rng); // clips at EV+0 (gain 4) and above
        const double speed = (0.35 + 0.45 * uni(rng)) * std::min(h, w) / 13.0;
        const double ang = 2.0 * M_PI * uni(rng);
        b.vx = speed * std::cos(ang);
        b.vy = speed * std::sin(ang);
        blobs.push_back(b);
    }
    // global camera drift
    const double gspeed = (0.4 + 0.3 * uni(rng)) * std::min(h, w) / 13.0;
    const double gang = 2.0 * M_PI * uni(rng);
    const double gvx = gspeed * std::cos(gang), gvy = gspeed * std::sin(gang);

    // background gradient direction and range
    const double bang = 2.0 * M_PI * uni(rng);
    const double bx = std::cos(bang), by = std::sin(bang);
    const double b_lo = 0.02 + 0.02 * uni(rng), b_hi = 0.10 + 0.08 * uni(rng);

    SharpSequence seq;
    for (int k = 0; k < n_frames; ++k) {
        const double dt = static_cast<double>(k);
        Tensor<double> frame({3, h, w});
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const double gx = x - gvx * dt, gy = y - gvy * dt;
                const double u = 0.5 + 0.5 * std::sin(2.0 * M_PI * (gx * bx + gy * by) /
                                                      (1.7 * std::min(h, w)));
                double v = b_lo + (b_hi - b_lo) * u;
                for (const Blob& b : blobs) {
                    const double mvx = global_motion_only ? gvx : b.vx;
                    const double mvy = global_motion_only ? gvy : b.vy;
                    const double dx = x - (b.cx + mvx * dt);
                    const double dy = y - (b.cy + mvy * dt);
                    v += b.peak * std::exp(-(dx * dx + dy * dy) / (2.0 * b.r * b.r));
                }
                // mild color cast keeps the three channels distinct
                frame.at(0, y, x) = v * 1.00;
                frame.at(1, y, x) = v * 0.92;
                frame.at(2, y, x) = v * 0.85;
            }
        }
        seq.frames.push_back(std::move(frame));
        seq.timestamps.push_back(k / fps);
    }
    return seq;
}

} // namespace ehdr
