#pragma once

#include "ehdr/tensor.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ehdr {

struct Event {
    uint16_t x = 0;
    uint16_t y = 0;
    double t = 0.0;
    int8_t p = 0; // +1 or -1
};

struct EventStream {
    std::vector<Event> events;
    int width = 0;
    int height = 0;
    double t_start = 0.0;
    double t_end = 0.0;

    size_t size() const { return events.size(); }
};

// Polarity-separated temporal voxel grid, shape (2m, h, w). Positive events
// fill channels [0,m), negative [m,2m). Each event deposits total mass 1,
// linearly split between the two nearest bins on the normalized time axis
// t* = (m-1)(t-t0)/(t1-t0).
template <typename T>
struct VoxelGrid {
    Tensor<T> grid; // (2m, h, w)
    int bins = 0;
    double t_start = 0.0;
    double t_end = 0.0;
};

template <typename T>
VoxelGrid<T> voxelize(const EventStream& ev, int m, double t0, double t1) {
    if (m < 1) throw std::invalid_argument("voxelize: need at least one bin");
    if (!(t1 > t0)) throw std::invalid_argument("voxelize: degenerate span");
    VoxelGrid<T> vg;
    vg.bins = m;
    vg.t_start = t0;
    vg.t_end = t1;
    vg.grid = Tensor<T>({2 * m, ev.height, ev.width});
    const int64_t plane = static_cast<int64_t>(ev.height) * ev.width;
    for (const Event& e : ev.events) {
        if (e.t < t0 || e.t > t1) throw std::invalid_argument("voxelize: event outside span");
        const int group = e.p > 0 ? 0 : m;
        const int64_t pix = static_cast<int64_t>(e.y) * ev.width + e.x;
        if (m == 1) {
            vg.grid[group * plane + pix] += T(1);
            continue;
        }
        const double ts = (m - 1) * (e.t - t0) / (t1 - t0);
        int b0 = static_cast<int>(ts);
        if (b0 > m - 2) b0 = m - 2; // ts == m-1 lands fully in the last bin
        const double f = ts - b0;
        vg.grid[(group + b0) * plane + pix] += static_cast<T>(1.0 - f);
        vg.grid[(group + b0 + 1) * plane + pix] += static_cast<T>(f);
    }
    return vg;
}

// Splits at t: events with t_i <= t go left (span [t0,t]), the rest right
// (span [t,t1]).
std::pair<EventStream, EventStream> split_at(const EventStream& ev, double t);

// events.bin: 16-byte header (magic "EVT1", u32 width, u32 height, u32 count)
// followed by 16-byte packed records (u16 x, u16 y, f64 t, i8 p, 3 pad).
void write_events(const std::string& path, const EventStream& ev);
EventStream read_events(const std::string& path);

} // namespace ehdr
