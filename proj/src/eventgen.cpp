#include "nuclass/eventgen.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace nuclass::eventgen {

void CompositionSpec::validate() const {
    if (frac_nue_cc < 0 || frac_numu_cc < 0 || frac_nc < 0)
        throw ConfigError("composition fractions must be nonnegative");
    double sum = frac_nue_cc + frac_numu_cc + frac_nc;
    if (std::abs(sum - 1.0) > 1e-9)
        throw ConfigError("composition fractions must sum to 1 (got " + std::to_string(sum) + ")");
}

EventTruth sample_truth(uint64_t rng_seed, const CompositionSpec& composition,
                        const DetectorGeometry& geom) {
    composition.validate();
    geom.validate();
    std::mt19937_64 rng(rng_seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    EventTruth truth;
    double u = unit(rng);
    if (u < composition.frac_nue_cc) {
        truth.flavor = Flavor::NuE;
        truth.current = Current::CC;
    } else if (u < composition.frac_nue_cc + composition.frac_numu_cc) {
        truth.flavor = Flavor::NuMu;
        truth.current = Current::CC;
    } else {
        // NC flavor is unobservable in the maps; split evenly for bookkeeping.
        truth.flavor = unit(rng) < 0.5 ? Flavor::NuE : Flavor::NuMu;
        truth.current = Current::NC;
    }
    truth.interaction = interaction_class(truth.flavor, truth.current);

    truth.energy_gev = 0.5 + unit(rng) * 9.5;
    const double m = kVertexMargin;
    truth.vertex.x = m + unit(rng) * (geom.width_x - 2 * m);
    truth.vertex.y = m + unit(rng) * (geom.height_y - 2 * m);
    truth.vertex.z = m + unit(rng) * (geom.length_z - 2 * m);
    return truth;
}

namespace {

bool inside(const Vec3& p, const DetectorGeometry& g) {
    return p.x >= 0 && p.x <= g.width_x && p.y >= 0 && p.y <= g.height_y && p.z >= 0 &&
           p.z <= g.length_z;
}

Vec3 clamp_inside(Vec3 p, const DetectorGeometry& g) {
    p.x = std::clamp(p.x, 0.0, g.width_x);
    p.y = std::clamp(p.y, 0.0, g.height_y);
    p.z = std::clamp(p.z, 0.0, g.length_z);
    return p;
}

// Forward-biased axis: z sign toward the far wall, transverse components
// toward the detector center so long tracks are not cut short at the walls.
Vec3 sample_axis(const Vec3& vertex, const DetectorGeometry& g, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    double cos_theta = 0.95 + 0.05 * unit(rng);
    double sin_theta = std::sqrt(std::max(0.0, 1.0 - cos_theta * cos_theta));
    double phi = 2.0 * M_PI * unit(rng);
    double dz = (vertex.z < g.length_z / 2 ? 1.0 : -1.0) * cos_theta;
    double dx = sin_theta * std::cos(phi);
    double dy = sin_theta * std::sin(phi);
    if ((vertex.x > g.width_x / 2) == (dx > 0)) dx = -dx;
    if ((vertex.y > g.height_y / 2) == (dy > 0)) dy = -dy;
    return {dx, dy, dz};
}

// Compact hadronic cluster at the vertex. Radius is hard-capped so NC events
// stay visibly shorter than CC muon tracks of the same energy.
void add_hadronic_cluster(std::vector<Deposit>& out, const Vec3& vertex, double energy_gev,
                          const DetectorGeometry& g, std::mt19937_64& rng) {
    if (energy_gev <= 0) return;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::exponential_distribution<double> radial(1.0 / 0.12);

    int n = std::max(12, static_cast<int>(energy_gev * 90.0));
    double per_deposit = energy_gev * 1000.0 / n;
    for (int i = 0; i < n; ++i) {
        double r = std::min(radial(rng), 0.45);
        double ct = 2.0 * unit(rng) - 1.0;
        double st = std::sqrt(std::max(0.0, 1.0 - ct * ct));
        double phi = 2.0 * M_PI * unit(rng);
        // Slight forward elongation along z.
        Vec3 p{vertex.x + r * st * std::cos(phi), vertex.y + r * st * std::sin(phi),
               vertex.z + r * ct * 1.4};
        double e = per_deposit * (0.5 + unit(rng));
        out.push_back({clamp_inside(p, g), std::max(e, 1e-3)});
    }
    (void)gauss;
}

// Straight MIP track with multiple-scattering jitter.
void add_track(std::vector<Deposit>& out, const Vec3& vertex, double lepton_energy_gev,
               const DetectorGeometry& g, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Vec3 axis = sample_axis(vertex, g, rng);
    double length = kTrackMetersPerGeV * lepton_energy_gev;
    double step = g.native_pitch;
    double off_u = 0, off_v = 0; // random-walk transverse offsets
    // Orthonormal transverse frame for the scatter offsets.
    Vec3 tu{axis.z, 0, -axis.x};
    double nu = std::sqrt(tu.x * tu.x + tu.z * tu.z);
    tu = {tu.x / nu, 0, tu.z / nu};
    Vec3 tv{axis.y * tu.z, axis.z * tu.x - axis.x * tu.z, -axis.y * tu.x};

    for (double s = step; s <= length; s += step) {
        off_u += gauss(rng) * 8e-4;
        off_v += gauss(rng) * 8e-4;
        Vec3 p{vertex.x + axis.x * s + tu.x * off_u + tv.x * off_v,
               vertex.y + axis.y * s + tu.y * off_u + tv.y * off_v,
               vertex.z + axis.z * s + tu.z * off_u + tv.z * off_v};
        if (!inside(p, g)) break;
        double dedx = 1.05 + 0.15 * gauss(rng); // MeV per 5 mm step
        out.push_back({p, std::max(dedx, 0.1)});
    }
}

// Conical electromagnetic shower: gamma-distributed longitudinal profile
// with the peak depth growing logarithmically with energy, transverse
// spread growing with depth.
void add_em_shower(std::vector<Deposit>& out, const Vec3& vertex, double electron_energy_gev,
                   const DetectorGeometry& g, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Vec3 axis = sample_axis(vertex, g, rng);

    const double rad_length = 0.14;    // meters, LAr-like
    const double critical_gev = 0.032; // shower-max scale
    double t_max = std::max(0.5, std::log(electron_energy_gev / critical_gev));
    const double b = 0.5;
    std::gamma_distribution<double> depth_dist(1.0 + b * t_max, 1.0 / b);

    int n = std::max(40, static_cast<int>(electron_energy_gev * 160.0));
    double per_deposit = electron_energy_gev * 1000.0 / n;
    Vec3 tu{axis.z, 0, -axis.x};
    double nu = std::sqrt(tu.x * tu.x + tu.z * tu.z);
    tu = {tu.x / nu, 0, tu.z / nu};
    Vec3 tv{axis.y * tu.z, axis.z * tu.x - axis.x * tu.z, -axis.y * tu.x};

    for (int i = 0; i < n; ++i) {
        double t = depth_dist(rng);
        double depth = t * rad_length;
        double sigma = 0.015 + 0.012 * t; // meters, widens with depth
        double du = gauss(rng) * sigma;
        double dv = gauss(rng) * sigma;
        Vec3 p{vertex.x + axis.x * depth + tu.x * du + tv.x * dv,
               vertex.y + axis.y * depth + tu.y * du + tv.y * dv,
               vertex.z + axis.z * depth + tu.z * du + tv.z * dv};
        double e = per_deposit * (0.5 + unit(rng));
        out.push_back({clamp_inside(p, g), std::max(e, 1e-3)});
    }
}

} // namespace

DepositCloud deposit_event(const EventTruth& truth, uint64_t rng_seed,
                           const DetectorGeometry& geom) {
    truth.validate(geom);
    std::mt19937_64 rng(rng_seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    DepositCloud cloud;

    switch (truth.interaction) {
        case InteractionClass::NUMU_CC: {
            double lepton_frac = 0.5 + 0.3 * unit(rng);
            add_track(cloud.deposits, truth.vertex, lepton_frac * truth.energy_gev, geom, rng);
            add_hadronic_cluster(cloud.deposits, truth.vertex,
                                 (1.0 - lepton_frac) * truth.energy_gev, geom, rng);
            break;
        }
        case InteractionClass::NUE_CC: {
            double lepton_frac = 0.5 + 0.3 * unit(rng);
            add_em_shower(cloud.deposits, truth.vertex, lepton_frac * truth.energy_gev, geom, rng);
            add_hadronic_cluster(cloud.deposits, truth.vertex,
                                 (1.0 - lepton_frac) * truth.energy_gev, geom, rng);
            break;
        }
        case InteractionClass::NC: {
            double visible_frac = 0.2 + 0.6 * unit(rng);
            add_hadronic_cluster(cloud.deposits, truth.vertex, visible_frac * truth.energy_gev,
                                 geom, rng);
            break;
        }
    }
    return cloud;
}

double PlaneMap::total() const {
    double s = 0;
    for (double e : energy_mev) s += e;
    return s;
}

PlaneMap bin_native(const DepositCloud& cloud, const DetectorGeometry& geom, int axis_u) {
    double extent_u = axis_u == 0 ? geom.width_x : geom.height_y;
    PlaneMap map;
    map.n_u = static_cast<int>(std::ceil(extent_u / geom.native_pitch));
    map.n_z = static_cast<int>(std::ceil(geom.length_z / geom.native_pitch));
    map.energy_mev.assign(static_cast<size_t>(map.n_u) * map.n_z, 0.0);
    for (const auto& d : cloud.deposits) {
        double u = axis_u == 0 ? d.position.x : d.position.y;
        int iu = std::min(static_cast<int>(u / geom.native_pitch), map.n_u - 1);
        int iz = std::min(static_cast<int>(d.position.z / geom.native_pitch), map.n_z - 1);
        if (iu < 0 || iz < 0) continue;
        map.at(iu, iz) += d.energy_mev;
    }
    return map;
}

PlaneMap downsample(const PlaneMap& map, int factor) {
    if (factor < 1) throw InvalidInputError("downsample factor must be >= 1");
    PlaneMap out;
    out.n_u = (map.n_u + factor - 1) / factor;
    out.n_z = (map.n_z + factor - 1) / factor;
    out.energy_mev.assign(static_cast<size_t>(out.n_u) * out.n_z, 0.0);
    for (int iz = 0; iz < map.n_z; ++iz)
        for (int iu = 0; iu < map.n_u; ++iu) out.at(iu / factor, iz / factor) += map.at(iu, iz);
    return out;
}

uint8_t encode_intensity(double energy_mev) {
    if (energy_mev <= 0) return 0;
    double v = std::log1p(energy_mev / kIntensityE0Mev) / std::log1p(kIntensityEmaxMev / kIntensityE0Mev);
    return static_cast<uint8_t>(std::lround(255.0 * std::min(1.0, v)));
}

namespace {

// Vertex-centered crop of one view, zero-padded outside the detector footprint.
std::vector<uint8_t> render_view(const PlaneMap& map, double vertex_u, double vertex_z,
                                 const DetectorGeometry& geom) {
    int half = geom.crop_size / 2;
    int cu = static_cast<int>(vertex_u / geom.native_pitch);
    int cz = static_cast<int>(vertex_z / geom.native_pitch);
    std::vector<uint8_t> view(static_cast<size_t>(geom.crop_size) * geom.crop_size, 0);
    for (int rz = 0; rz < geom.crop_size; ++rz) {
        int iz = cz - half + rz;
        if (iz < 0 || iz >= map.n_z) continue;
        for (int ru = 0; ru < geom.crop_size; ++ru) {
            int iu = cu - half + ru;
            if (iu < 0 || iu >= map.n_u) continue;
            double e = map.at(iu, iz);
            if (e > 0) view[static_cast<size_t>(rz) * geom.crop_size + ru] = encode_intensity(e);
        }
    }
    return view;
}

} // namespace

PixelMapPair project_and_render(const DepositCloud& cloud, const EventTruth& truth,
                                const DetectorGeometry& geom) {
    geom.validate();
    if (cloud.deposits.empty()) throw InvalidInputError("cannot render an empty deposit cloud");
    // The crop is taken at native pitch: 512 px at 5 mm covers 2.56 m, the
    // only pitch at which the crop fills with detector data. coarse_pitch
    // drives the separate downsample() step.
    PlaneMap xz = bin_native(cloud, geom, 0);
    PlaneMap yz = bin_native(cloud, geom, 1);
    PixelMapPair pair;
    pair.size = geom.crop_size;
    pair.truth = truth;
    pair.view_xz = render_view(xz, truth.vertex.x, truth.vertex.z, geom);
    pair.view_yz = render_view(yz, truth.vertex.y, truth.vertex.z, geom);
    return pair;
}

PixelMapPair generate_event(uint64_t base_seed, uint64_t event_id, const DetectorGeometry& geom,
                            const CompositionSpec& composition) {
    uint64_t seed = event_seed(base_seed, event_id);
    EventTruth truth = sample_truth(seed, composition, geom);
    DepositCloud cloud = deposit_event(truth, splitmix64(seed), geom);
    PixelMapPair pair = project_and_render(cloud, truth, geom);
    pair.event_id = event_id;
    return pair;
}

void generate_dataset(uint64_t n_events, const DetectorGeometry& geom,
                      const CompositionSpec& composition, uint64_t base_seed,
                      const std::function<void(PixelMapPair&&)>& sink) {
    if (n_events == 0) throw InvalidInputError("n_events must be > 0");
    composition.validate();
    geom.validate();
    for (uint64_t id = 0; id < n_events; ++id)
        sink(generate_event(base_seed, id, geom, composition));
}

} // namespace nuclass::eventgen
