#include "ehdr/events.hpp"

#include <cstring>
#include <fstream>

namespace ehdr {

std::pair<EventStream, EventStream> split_at(const EventStream& ev, double t) {
    if (t < ev.t_start || t > ev.t_end)
        throw std::invalid_argument("split_at: t outside stream span");
    EventStream left, right;
    left.width = right.width = ev.width;
    left.height = right.height = ev.height;
    left.t_start = ev.t_start;
    left.t_end = t;
    right.t_start = t;
    right.t_end = ev.t_end;
    for (const Event& e : ev.events)
        (e.t <= t ? left : right).events.push_back(e);
    return {std::move(left), std::move(right)};
}

namespace {

constexpr char kMagic[4] = {'E', 'V', 'T', '1'};

void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u16(std::string& buf, uint16_t v) {
    for (int i = 0; i < 2; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& buf, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

uint32_t get_u32(const char* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(p[i])) << (8 * i);
    return v;
}

uint16_t get_u16(const char* p) {
    return static_cast<uint16_t>(static_cast<uint8_t>(p[0]) |
                                 (static_cast<uint16_t>(static_cast<uint8_t>(p[1])) << 8));
}

double get_f64(const char* p) {
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(static_cast<uint8_t>(p[i])) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

} // namespace

void write_events(const std::string& path, const EventStream& ev) {
    std::string buf;
    buf.reserve(16 + ev.events.size() * 16);
    buf.append(kMagic, 4);
    put_u32(buf, static_cast<uint32_t>(ev.width));
    put_u32(buf, static_cast<uint32_t>(ev.height));
    put_u32(buf, static_cast<uint32_t>(ev.events.size()));
    for (const Event& e : ev.events) {
        put_u16(buf, e.x);
        put_u16(buf, e.y);
        put_f64(buf, e.t);
        buf.push_back(static_cast<char>(e.p));
        buf.append(3, '\0');
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_events: cannot open " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("write_events: short write to " + path);
}

EventStream read_events(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_events: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 16 || std::memcmp(buf.data(), kMagic, 4) != 0)
        throw std::runtime_error("read_events: bad header in " + path);
    EventStream ev;
    ev.width = static_cast<int>(get_u32(buf.data() + 4));
    ev.height = static_cast<int>(get_u32(buf.data() + 8));
    const uint32_t count = get_u32(buf.data() + 12);
    if (buf.size() != 16 + static_cast<size_t>(count) * 16)
        throw std::runtime_error("read_events: truncated file " + path);
    ev.events.resize(count);
    for (uint32_t i = 0; i < count; ++i) {
        const char* r = buf.data() + 16 + static_cast<size_t>(i) * 16;
        ev.events[i].x = get_u16(r);
        ev.events[i].y = get_u16(r + 2);
        ev.events[i].t = get_f64(r + 4);
        ev.events[i].p = static_cast<int8_t>(r[12]);
    }
    if (!ev.events.empty()) {
        ev.t_start = ev.events.front().t;
        ev.t_end = ev.events.back().t;
    }
    return ev;
}

} // namespace ehdr
