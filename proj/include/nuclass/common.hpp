// Core domain types shared across the pipeline.
#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace nuclass {

// ---------------------------------------------------------------------------
// Errors. Exit-code mapping lives in the CLI; library code throws.
// ---------------------------------------------------------------------------

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InvalidInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataMismatchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Interaction taxonomy
// ---------------------------------------------------------------------------

enum class Flavor : uint8_t { NuE = 0, NuMu = 1 };
enum class Current : uint8_t { CC = 0, NC = 1 };
enum class InteractionClass : uint8_t { NUE_CC = 0, NUMU_CC = 1, NC = 2 };

constexpr int kNumClasses = 3;

inline InteractionClass interaction_class(Flavor f, Current c) {
    if (c == Current::NC) return InteractionClass::NC;
    return f == Flavor::NuE ? InteractionClass::NUE_CC : InteractionClass::NUMU_CC;
}

// Canonical label surface forms. Leading words are distinct on purpose so
// first-token confidence extraction is well defined for common tokenizers.
inline const std::array<std::string, 3>& class_labels() {
    static const std::array<std::string, 3> labels = {
        "electron neutrino charged current",
        "muon neutrino charged current",
        "neutral current",
    };
    return labels;
}

inline const char* class_name(InteractionClass c) {
    switch (c) {
        case InteractionClass::NUE_CC: return "NUE_CC";
        case InteractionClass::NUMU_CC: return "NUMU_CC";
        case InteractionClass::NC: return "NC";
    }
    return "?";
}

InteractionClass class_from_name(const std::string& name);

// ---------------------------------------------------------------------------
// Geometry and truth
// ---------------------------------------------------------------------------

struct Vec3 {
    double x = 0, y = 0, z = 0;
};

struct DetectorGeometry {
    double width_x = 2.0;        // meters
    double height_y = 2.0;       // meters
    double length_z = 7.0;       // meters
    double native_pitch = 0.005; // meters
    double coarse_pitch = 0.05;  // meters, integer multiple of native_pitch
    int crop_size = 512;         // pixels, positive even

    void validate() const;
    int coarse_factor() const; // coarse_pitch / native_pitch, exact
};

struct EventTruth {
    Flavor flavor = Flavor::NuMu;
    Current current = Current::CC;
    double energy_gev = 1.0; // in (0, 10]
    Vec3 vertex;             // meters, inside detector volume
    InteractionClass interaction = InteractionClass::NUMU_CC;

    void validate(const DetectorGeometry& geom) const;
};

struct Deposit {
    Vec3 position;     // meters
    double energy_mev; // > 0
};

struct DepositCloud {
    std::vector<Deposit> deposits;
};

struct PixelMapPair {
    int size = 512;
    std::vector<uint8_t> view_xz; // row-major size*size, row = z index
    std::vector<uint8_t> view_yz;
    EventTruth truth;
    uint64_t event_id = 0;
};

struct Prediction {
    uint64_t event_id = 0;
    InteractionClass predicted = InteractionClass::NC;
    std::array<double, 3> confidences = {0, 0, 0}; // sums to 1
    std::array<double, 3> raw_logp = {0, 0, 0};    // first-token log-probs
    double latency_ms = 0;
};

// ---------------------------------------------------------------------------
// Deterministic per-event seeding: splitmix64 over (base_seed, event_id),
// so every event is a pure function of the pair and safe to generate from
// concurrent workers with disjoint id ranges.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t event_seed(uint64_t base_seed, uint64_t event_id) {
    return splitmix64(splitmix64(base_seed) ^ splitmix64(event_id + 0x51ed2701ULL));
}

// FNV-1a over bytes, used for split hashes and template hashes.
uint64_t fnv1a(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ULL);

} // namespace nuclass
