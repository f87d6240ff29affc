#include "nuclass/common.hpp"

#include <cmath>

namespace nuclass {

InteractionClass class_from_name(const std::string& name) {
    if (name == "NUE_CC") return InteractionClass::NUE_CC;
    if (name == "NUMU_CC") return InteractionClass::NUMU_CC;
    if (name == "NC") return InteractionClass::NC;
    throw InvalidInputError("unknown interaction class: " + name);
}

void DetectorGeometry::validate() const {
    if (width_x <= 0 || height_y <= 0 || length_z <= 0 || native_pitch <= 0 || coarse_pitch <= 0)
        throw ConfigError("detector dimensions and pitches must be strictly positive");
    double ratio = coarse_pitch / native_pitch;
    if (std::abs(ratio - std::round(ratio)) > 1e-9 || ratio < 1.0 - 1e-9)
        throw ConfigError("coarse_pitch must be an integer multiple of native_pitch");
    if (crop_size <= 0 || crop_size % 2 != 0)
        throw ConfigError("crop_size must be a positive even integer");
}

int DetectorGeometry::coarse_factor() const {
    return static_cast<int>(std::round(coarse_pitch / native_pitch));
}

void EventTruth::validate(const DetectorGeometry& geom) const {
    if (!(energy_gev > 0) || energy_gev > 10.0)
        throw InvalidInputError("event energy must be in (0, 10] GeV");
    if (interaction != interaction_class(flavor, current))
        throw InvalidInputError("interaction_class inconsistent with (flavor, current)");
    if (vertex.x < 0 || vertex.x > geom.width_x || vertex.y < 0 || vertex.y > geom.height_y ||
        vertex.z < 0 || vertex.z > geom.length_z)
        throw InvalidInputError("vertex outside detector volume");
}

uint64_t fnv1a(const void* data, size_t n, uint64_t seed) {
    const auto* p = static_cast<const uint8_t*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace nuclass
