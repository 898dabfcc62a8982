#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "error.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace iwgt {

struct PathLossConfig {
    double exponent_near = 2.0;
    double exponent_far = 4.0;
    double breakpoint_m = 50.0;
    double ref_loss_db = 38.46;
    double shadowing_std_db = 7.0;

    void validate() const {
        if (!(breakpoint_m > 0)) throw InvalidArgument("pathloss: breakpoint_m must be > 0");
        if (!(shadowing_std_db >= 0)) throw InvalidArgument("pathloss: shadowing_std_db must be >= 0");
        if (!(exponent_near >= 0) || !(exponent_far >= exponent_near))
            throw InvalidArgument("pathloss: require exponent_far >= exponent_near >= 0");
    }
};

struct ScenarioConfig {
    std::string scenario_id = "custom";
    double region_side_m = 1000.0;
    std::size_t K = 20;
    double d_min_m = 2.0;
    double d_max_m = 65.0;
    PathLossConfig pathloss{};
    double bandwidth_hz = 10e6;
    double p_max_dbm = 10.0;
    double noise_psd_dbm_hz = -174.0;

    void validate() const {
        if (K < 1) throw InvalidArgument("scenario " + scenario_id + ": K must be >= 1");
        if (!(d_min_m > 0) || !(d_min_m < d_max_m) || !(d_max_m <= region_side_m))
            throw InvalidArgument("scenario " + scenario_id +
                                  ": require 0 < d_min_m < d_max_m <= region_side_m");
        if (!(bandwidth_hz > 0)) throw InvalidArgument("scenario " + scenario_id + ": bandwidth_hz must be > 0");
        pathloss.validate();
    }

    /// Per-link power budget in watts.
    double p_max_w() const { return std::pow(10.0, (p_max_dbm - 30.0) / 10.0); }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PathLossConfig, exponent_near, exponent_far, breakpoint_m,
                                                ref_loss_db, shadowing_std_db)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ScenarioConfig, scenario_id, region_side_m, K, d_min_m, d_max_m,
                                                pathloss, bandwidth_hz, p_max_dbm, noise_psd_dbm_hz)

struct Point {
    double x = 0;
    double y = 0;
    friend bool operator==(const Point&, const Point&) = default;
};

inline double distance(const Point& a, const Point& b) { return std::hypot(a.x - b.x, a.y - b.y); }

struct Topology {
    std::vector<Point> tx_pos;
    std::vector<Point> rx_pos;

    std::size_t size() const { return tx_pos.size(); }
    /// Distance from transmitter j to receiver k.
    double link_distance(std::size_t k, std::size_t j) const { return distance(rx_pos[k], tx_pos[j]); }

    friend bool operator==(const Topology&, const Topology&) = default;
};

/// K x K complex amplitude gains, row-major; (k, j) is transmitter j -> receiver k.
struct ChannelMatrix {
    std::size_t K = 0;
    std::vector<std::complex<double>> data;

    ChannelMatrix() = default;
    explicit ChannelMatrix(std::size_t k) : K(k), data(k * k) {}

    std::complex<double>& operator()(std::size_t k, std::size_t j) { return data[k * K + j]; }
    const std::complex<double>& operator()(std::size_t k, std::size_t j) const { return data[k * K + j]; }

    /// |h_kj|^2 for every entry, row-major.
    std::vector<double> power_gains() const {
        std::vector<double> g(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) g[i] = std::norm(data[i]);
        return g;
    }

    friend bool operator==(const ChannelMatrix&, const ChannelMatrix&) = default;
};

/// Real-valued power gain matrix built directly, e.g. for hand-constructed
/// toy channels. Amplitudes are taken as sqrt(gain) with zero phase.
inline ChannelMatrix channel_from_power_gains(std::size_t K, const std::vector<double>& gains) {
    if (gains.size() != K * K) throw InvalidArgument("channel_from_power_gains: expected K*K gains");
    ChannelMatrix H(K);
    for (std::size_t i = 0; i < gains.size(); ++i) {
        if (!(gains[i] >= 0)) throw InvalidArgument("channel_from_power_gains: negative gain");
        H.data[i] = std::sqrt(gains[i]);
    }
    return H;
}

struct ChannelSnapshot {
    Topology topology;
    ChannelMatrix H;
    std::uint64_t seed = 0;
    std::string scenario_id;

    std::size_t K() const { return H.K; }
    friend bool operator==(const ChannelSnapshot&, const ChannelSnapshot&) = default;
};

/// Thermal noise power in watts for a PSD in dBm/Hz over the given bandwidth.
inline double noise_power(double psd_dbm_hz, double bandwidth_hz) {
    if (!(bandwidth_hz > 0)) throw InvalidArgument("noise_power: bandwidth_hz must be > 0");
    return std::pow(10.0, (psd_dbm_hz + 10.0 * std::log10(bandwidth_hz) - 30.0) / 10.0);
}

inline double noise_power(const ScenarioConfig& cfg) { return noise_power(cfg.noise_psd_dbm_hz, cfg.bandwidth_hz); }

/// Deterministic dual-slope path loss in dB. Continuous at the breakpoint.
inline double path_loss_db(double d_m, const PathLossConfig& pl) {
    if (!(d_m > 0)) throw InvalidArgument("path_loss_db: distance must be > 0, got " + std::to_string(d_m));
    if (d_m <= pl.breakpoint_m) return pl.ref_loss_db + 10.0 * pl.exponent_near * std::log10(d_m);
    return pl.ref_loss_db + 10.0 * pl.exponent_near * std::log10(pl.breakpoint_m) +
           10.0 * pl.exponent_far * std::log10(d_m / pl.breakpoint_m);
}

/// O(K^2) check of every Topology invariant.
inline bool topology_is_valid(const Topology& t, const ScenarioConfig& cfg) {
    const std::size_t K = t.size();
    if (t.rx_pos.size() != K) return false;
    auto inside = [&](const Point& p) {
        return p.x >= 0 && p.x <= cfg.region_side_m && p.y >= 0 && p.y <= cfg.region_side_m;
    };
    for (std::size_t k = 0; k < K; ++k) {
        if (!inside(t.tx_pos[k]) || !inside(t.rx_pos[k])) return false;
        const double own = t.link_distance(k, k);
        if (own < cfg.d_min_m || own > cfg.d_max_m) return false;
        for (std::size_t j = 0; j < K; ++j)
            if (j != k && !(own < t.link_distance(k, j))) return false;
    }
    return true;
}

inline constexpr int kReceiverRetryBudget = 10000;
/// Fresh transmitter layouts tried when some receiver cannot be placed at all
/// (two transmitters too close together leave no valid spot).
inline constexpr int kLayoutRetryBudget = 100;

/// Transmitters uniform over the square; each receiver uniform over the
/// annulus around its transmitter, redrawn until it lies inside the region and
/// strictly closer to its own transmitter than to any other. A layout whose
/// receiver exhausts its budget is discarded and redrawn from the same stream,
/// so seeds that succeed on the first layout are unaffected.
inline Topology sample_topology(const ScenarioConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng = make_rng(seed, Stream::Topology);
    std::uniform_real_distribution<double> coord(0.0, cfg.region_side_m);
    std::uniform_real_distribution<double> r2(cfg.d_min_m * cfg.d_min_m, cfg.d_max_m * cfg.d_max_m);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);

    Topology t;
    t.tx_pos.resize(cfg.K);
    t.rx_pos.resize(cfg.K);
    std::size_t failed_link = 0;
    for (int layout = 0; layout < kLayoutRetryBudget; ++layout) {
        for (auto& p : t.tx_pos) {
            p.x = coord(rng);
            p.y = coord(rng);
        }
        bool complete = true;
        for (std::size_t k = 0; k < cfg.K && complete; ++k) {
            bool placed = false;
            for (int attempt = 0; attempt < kReceiverRetryBudget && !placed; ++attempt) {
                const double r = std::sqrt(r2(rng));
                const double a = angle(rng);
                const Point rx{t.tx_pos[k].x + r * std::cos(a), t.tx_pos[k].y + r * std::sin(a)};
                if (rx.x < 0 || rx.x > cfg.region_side_m || rx.y < 0 || rx.y > cfg.region_side_m) continue;
                const double own = distance(rx, t.tx_pos[k]);
                if (own < cfg.d_min_m || own > cfg.d_max_m) continue;
                placed = true;
                for (std::size_t j = 0; j < cfg.K && placed; ++j)
                    if (j != k && !(own < distance(rx, t.tx_pos[j]))) placed = false;
                if (placed) t.rx_pos[k] = rx;
            }
            if (!placed) {
                complete = false;
                failed_link = k;
            }
        }
        if (complete) return t;
    }
    throw GenerationFailure("sample_topology: no valid receiver position for link " + std::to_string(failed_link) +
                            " after " + std::to_string(kReceiverRetryBudget) + " attempts in each of " +
                            std::to_string(kLayoutRetryBudget) + " layouts (seed " + std::to_string(seed) + ")");
}

struct ChannelOptions {
    /// Test hook: replaces the Rayleigh factor g_kj with 1.
    bool unit_fading = false;
};

inline ChannelSnapshot sample_channel(const Topology& topology, const ScenarioConfig& cfg, std::uint64_t seed,
                                      ChannelOptions opts = {}) {
    const std::size_t K = topology.size();
    if (K == 0 || topology.rx_pos.size() != K) throw InvalidArgument("sample_channel: malformed topology");
    Rng shadow_rng = make_rng(seed, Stream::Shadowing);
    Rng fading_rng = make_rng(seed, Stream::Fading);
    std::normal_distribution<double> shadow(0.0, cfg.pathloss.shadowing_std_db);
    std::normal_distribution<double> gauss(0.0, std::sqrt(0.5));

    ChannelSnapshot s;
    s.topology = topology;
    s.seed = seed;
    s.scenario_id = cfg.scenario_id;
    s.H = ChannelMatrix(K);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t j = 0; j < K; ++j) {
            const double pl = path_loss_db(topology.link_distance(k, j), cfg.pathloss);
            const double sh = cfg.pathloss.shadowing_std_db > 0 ? shadow(shadow_rng) : 0.0;
            const double amplitude = std::sqrt(std::pow(10.0, -(pl + sh) / 10.0));
            std::complex<double> g{1.0, 0.0};
            if (!opts.unit_fading) {
                const double re = gauss(fading_rng);
                const double im = gauss(fading_rng);
                g = {re, im};
            }
            s.H(k, j) = amplitude * g;
        }
    }
    return s;
}

inline ChannelSnapshot sample_snapshot(const ScenarioConfig& cfg, std::uint64_t seed) {
    return sample_channel(sample_topology(cfg, seed), cfg, seed);
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

enum class DatasetEncoding { Binary, Text };

inline constexpr int kDatasetFormatVersion = 1;

struct Dataset {
    ScenarioConfig scenario;
    std::uint64_t base_seed = 0;
    std::vector<ChannelSnapshot> snapshots;

    std::size_t size() const { return snapshots.size(); }
    bool empty() const { return snapshots.empty(); }
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class ByteReader {
public:
    ByteReader(const std::string& buf, std::size_t pos, const std::string& path) : buf_(buf), pos_(pos), path_(path) {}

    std::uint64_t u64() {
        if (pos_ + 8 > buf_.size()) throw FileError("dataset " + path_ + ": truncated record");
        std::uint64_t v = 0;
        for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + b])) << (8 * b);
        pos_ += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    bool done() const { return pos_ >= buf_.size(); }

private:
    const std::string& buf_;
    std::size_t pos_;
    const std::string& path_;
};

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace detail

/// Serializes a dataset: one JSON header line, then the records.
inline std::string encode_dataset(const Dataset& ds, DatasetEncoding enc) {
    nlohmann::json header = {
        {"format_version", kDatasetFormatVersion},
        {"encoding", enc == DatasetEncoding::Binary ? "binary" : "text"},
        {"scenario", ds.scenario},
        {"n_snapshots", ds.snapshots.size()},
        {"base_seed", ds.base_seed},
    };
    std::string out = header.dump() + "\n";
    for (const auto& s : ds.snapshots) {
        const std::size_t K = s.K();
        if (enc == DatasetEncoding::Binary) {
            detail::put_u64(out, s.seed);
            detail::put_u64(out, K);
            for (const auto& p : s.topology.tx_pos) detail::put_f64(out, p.x), detail::put_f64(out, p.y);
            for (const auto& p : s.topology.rx_pos) detail::put_f64(out, p.x), detail::put_f64(out, p.y);
            for (const auto& h : s.H.data) detail::put_f64(out, h.real()), detail::put_f64(out, h.imag());
        } else {
            out += std::to_string(s.seed) + " " + std::to_string(K);
            auto put = [&](double v) { out += " " + detail::format_double(v); };
            for (const auto& p : s.topology.tx_pos) put(p.x), put(p.y);
            for (const auto& p : s.topology.rx_pos) put(p.x), put(p.y);
            for (const auto& h : s.H.data) put(h.real()), put(h.imag());
            out += "\n";
        }
    }
    return out;
}

inline void write_dataset(const std::string& path, const Dataset& ds, DatasetEncoding enc = DatasetEncoding::Binary) {
    const std::string bytes = encode_dataset(ds, enc);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FileError("cannot open dataset for writing: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FileError("write failed for dataset: " + path);
}

inline Dataset decode_dataset(const std::string& bytes, const std::string& path = "<memory>") {
    const auto nl = bytes.find('\n');
    if (nl == std::string::npos) throw FileError("dataset " + path + ": missing header line");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(0, nl));
    } catch (const nlohmann::json::exception& e) {
        throw FileError("dataset " + path + ": bad header: " + e.what());
    }
    Dataset ds;
    std::size_t n = 0;
    std::string encoding;
    try {
        if (header.at("format_version").get<int>() != kDatasetFormatVersion)
            throw FileError("dataset " + path + ": unsupported format_version");
        ds.scenario = header.at("scenario").get<ScenarioConfig>();
        ds.base_seed = header.at("base_seed").get<std::uint64_t>();
        n = header.at("n_snapshots").get<std::size_t>();
        encoding = header.at("encoding").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw FileError("dataset " + path + ": bad header: " + e.what());
    }
    ds.snapshots.reserve(n);

    if (encoding == "binary") {
        detail::ByteReader r(bytes, nl + 1, path);
        for (std::size_t i = 0; i < n; ++i) {
            ChannelSnapshot s;
            s.scenario_id = ds.scenario.scenario_id;
            s.seed = r.u64();
            const std::size_t K = r.u64();
            if (K == 0 || K > 100000) throw FileError("dataset " + path + ": implausible K in record " + std::to_string(i));
            s.topology.tx_pos.resize(K);
            s.topology.rx_pos.resize(K);
            for (auto& p : s.topology.tx_pos) p.x = r.f64(), p.y = r.f64();
            for (auto& p : s.topology.rx_pos) p.x = r.f64(), p.y = r.f64();
            s.H = ChannelMatrix(K);
            for (auto& h : s.H.data) {
                const double re = r.f64();
                const double im = r.f64();
                h = {re, im};
            }
            ds.snapshots.push_back(std::move(s));
        }
        if (!r.done()) throw FileError("dataset " + path + ": trailing bytes after last record");
    } else if (encoding == "text") {
        std::istringstream in(bytes.substr(nl + 1));
        in.imbue(std::locale::classic());
        for (std::size_t i = 0; i < n; ++i) {
            ChannelSnapshot s;
            s.scenario_id = ds.scenario.scenario_id;
            std::size_t K = 0;
            if (!(in >> s.seed >> K) || K == 0) throw FileError("dataset " + path + ": truncated record " + std::to_string(i));
            std::vector<double> v(4 * K + 2 * K * K);
            for (auto& x : v) {
                std::string tok;
                if (!(in >> tok)) throw FileError("dataset " + path + ": truncated record " + std::to_string(i));
                x = std::strtod(tok.c_str(), nullptr);
            }
            s.topology.tx_pos.resize(K);
            s.topology.rx_pos.resize(K);
            std::size_t c = 0;
            for (auto& p : s.topology.tx_pos) p.x = v[c++], p.y = v[c++];
            for (auto& p : s.topology.rx_pos) p.x = v[c++], p.y = v[c++];
            s.H = ChannelMatrix(K);
            for (auto& h : s.H.data) {
                h = {v[c], v[c + 1]};
                c += 2;
            }
            ds.snapshots.push_back(std::move(s));
        }
    } else {
        throw FileError("dataset " + path + ": unknown encoding '" + encoding + "'");
    }
    return ds;
}

inline Dataset read_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FileError("cannot open dataset: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return decode_dataset(ss.str(), path);
}

/// Generates snapshots with seed base_seed + i. Generation is parallel over
/// indices; the output does not depend on the schedule.
inline Dataset make_dataset(const ScenarioConfig& cfg, std::size_t n_snapshots, std::uint64_t base_seed) {
    if (n_snapshots < 1) throw InvalidArgument("generate_dataset: n_snapshots must be >= 1");
    cfg.validate();
    Dataset ds;
    ds.scenario = cfg;
    ds.base_seed = base_seed;
    ds.snapshots.resize(n_snapshots);
    parallel_for(n_snapshots, [&](std::size_t i) { ds.snapshots[i] = sample_snapshot(cfg, base_seed + i); });
    return ds;
}

inline Dataset generate_dataset(const ScenarioConfig& cfg, std::size_t n_snapshots, std::uint64_t base_seed,
                                const std::string& path, DatasetEncoding enc = DatasetEncoding::Binary) {
    Dataset ds = make_dataset(cfg, n_snapshots, base_seed);
    write_dataset(path, ds, enc);
    return ds;
}

// ---------------------------------------------------------------------------
// Scenario library
// ---------------------------------------------------------------------------

/// Named scenarios. D1..D20 are the full-scale configurations (1 km square,
/// K in {20,35,50,65,80}); the `-toy` entries are the desk-scale analogues with
/// K in {4,6,8} in a 300 m square.
inline std::map<std::string, ScenarioConfig> scenario_library() {
    std::map<std::string, ScenarioConfig> lib;
    const std::array<std::size_t, 5> full_k{20, 35, 50, 65, 80};
    const std::array<std::pair<double, double>, 3> ranges{{{2, 65}, {10, 50}, {30, 70}}};
    int idx = 1;
    for (auto K : full_k) {
        for (auto [lo, hi] : ranges) {
            ScenarioConfig c;
            c.scenario_id = "D" + std::to_string(idx++);
            c.K = K;
            c.d_min_m = lo;
            c.d_max_m = hi;
            lib[c.scenario_id] = c;
        }
    }
    for (auto K : full_k) {
        ScenarioConfig c;
        c.scenario_id = "D" + std::to_string(idx++);
        c.K = K;
        c.d_min_m = 1;
        c.d_max_m = 100;
        lib[c.scenario_id] = c;
    }

    const std::array<std::size_t, 3> toy_k{4, 6, 8};
    idx = 1;
    for (auto K : toy_k) {
        for (auto [lo, hi] : ranges) {
            ScenarioConfig c;
            c.scenario_id = "D" + std::to_string(idx++) + "-toy";
            c.K = K;
            c.region_side_m = 300;
            c.d_min_m = lo;
            c.d_max_m = hi;
            lib[c.scenario_id] = c;
        }
    }
    idx = 16;
    for (auto K : toy_k) {
        ScenarioConfig c;
        c.scenario_id = "D" + std::to_string(idx++) + "-toy";
        c.K = K;
        c.region_side_m = 300;
        c.d_min_m = 1;
        c.d_max_m = 100;
        lib[c.scenario_id] = c;
    }
    return lib;
}

inline ScenarioConfig find_scenario(const std::string& name) {
    const auto lib = scenario_library();
    const auto it = lib.find(name);
    if (it == lib.end()) throw ConfigError("unknown scenario '" + name + "'");
    return it->second;
}

} // namespace iwgt
