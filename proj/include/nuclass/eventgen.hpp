// Parametric toy generator for neutrino interaction events.
//
// Stands in for a full GENIE+GEANT4 chain: events carry the same label
// taxonomy and composition, and render to the same dual-view pixel-map
// contract (two crop_size x crop_size 8-bit grids centered on the vertex).
#pragma once

#include <functional>

#include "nuclass/common.hpp"

namespace nuclass::eventgen {

struct CompositionSpec {
    double frac_nue_cc = 0.37;
    double frac_numu_cc = 0.37;
    double frac_nc = 0.26;

    void validate() const; // nonnegative, sums to 1 within 1e-9
};

// Margin keeping sampled vertices away from the walls so crops stay populated.
constexpr double kVertexMargin = 0.2;

// Minimum-ionizing track length per GeV of lepton energy (NUMU_CC topology).
constexpr double kTrackMetersPerGeV = 2.0;

EventTruth sample_truth(uint64_t rng_seed, const CompositionSpec& composition,
                        const DetectorGeometry& geom = {});

DepositCloud deposit_event(const EventTruth& truth, uint64_t rng_seed,
                           const DetectorGeometry& geom = {});

// Dense energy map binned at native pitch. Row-major: index = iz * n_u + iu
// where u is the transverse axis (x for XZ, y for YZ).
struct PlaneMap {
    int n_u = 0;
    int n_z = 0;
    std::vector<double> energy_mev; // n_u * n_z

    double& at(int iu, int iz) { return energy_mev[static_cast<size_t>(iz) * n_u + iu]; }
    double at(int iu, int iz) const { return energy_mev[static_cast<size_t>(iz) * n_u + iu]; }
    double total() const;
};

PlaneMap bin_native(const DepositCloud& cloud, const DetectorGeometry& geom, int axis_u);

// Block-sums a native map by an integer factor (partial edge blocks kept).
// Total energy is conserved exactly up to floating-point summation order.
PlaneMap downsample(const PlaneMap& map, int factor);

// Log intensity encoding: 255 * min(1, log(1+E/E0) / log(1+Emax/E0)).
constexpr double kIntensityE0Mev = 0.5;
constexpr double kIntensityEmaxMev = 500.0;
uint8_t encode_intensity(double energy_mev);

// Renders the vertex-centered crop of both views at native pitch.
// Throws InvalidInputError on an empty cloud.
PixelMapPair project_and_render(const DepositCloud& cloud, const EventTruth& truth,
                                const DetectorGeometry& geom);

// Deterministic event stream: every event is a pure function of
// (base_seed, event_id), so callers may shard id ranges across workers.
PixelMapPair generate_event(uint64_t base_seed, uint64_t event_id,
                            const DetectorGeometry& geom, const CompositionSpec& composition);

void generate_dataset(uint64_t n_events, const DetectorGeometry& geom,
                      const CompositionSpec& composition, uint64_t base_seed,
                      const std::function<void(PixelMapPair&&)>& sink);

} // namespace nuclass::eventgen
