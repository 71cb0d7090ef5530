#pragma once
#include <vector>

namespace ionread::optics {

enum class PsfKind { airy, gaussian, tabulated };

/// Normalized Airy intensity [2 J1(x)/x]^2 with peak 1 at r = 0. The radial
/// scale is set so the first-null diameter equals 1.22 lambda / tan(alpha)
/// in the object plane.
double airy_radial_intensity(double r_um, double wavelength_m,
                             double numerical_aperture);

/// First-null radius of the Airy pattern, micrometres.
double airy_first_null_radius_um(double wavelength_m, double numerical_aperture);

/// Radially symmetric point-spread function, normalized so the integral over
/// the whole plane equals 1. Radii are object-plane micrometres; intensities
/// returned by operator() are per um^2.
class PointSpreadFunction {
 public:
  static PointSpreadFunction airy(double wavelength_m, double numerical_aperture);
  static PointSpreadFunction gaussian(double sigma_um);
  static PointSpreadFunction tabulated(std::vector<double> radii_um,
                                       std::vector<double> intensities);

  /// Stand-in for the measured (aberrated) objective: a tabulated profile
  /// whose integrated-signal-versus-pixel-rank curve and neighbour cross-talk
  /// reproduce the published four-ion imaging data at 14 um spacing.
  static PointSpreadFunction aberrated();

  /// Tabulated radial profile from a weighted sum of Gaussians (weights need
  /// not be normalized; the table is).
  static PointSpreadFunction gaussian_mixture(const std::vector<double>& weights,
                                              const std::vector<double>& sigmas_um);

  /// Weighted sum of radial Gaussian bumps exp(-(r-r0)^2 / 2 sigma^2); ring
  /// components (r0 > 0) model the structured wings of an aberrated
  /// objective.
  static PointSpreadFunction radial_profile(const std::vector<double>& weights,
                                            const std::vector<double>& centers_um,
                                            const std::vector<double>& sigmas_um);

  double operator()(double r_um) const;
  double encircled_energy(double radius_um) const;
  /// Radius containing 99.99% of the energy; evaluation beyond it is treated
  /// as spill and tracked rather than integrated.
  double support_radius_um() const { return support_um_; }
  PsfKind kind() const { return kind_; }

 private:
  PointSpreadFunction() = default;

  PsfKind kind_ = PsfKind::gaussian;
  // airy
  double airy_k_per_um_ = 0.0;  // x = k * r
  // gaussian
  double sigma_um_ = 0.0;
  // tabulated (uniform radial grid)
  double dr_um_ = 0.0;
  std::vector<double> table_;       // normalized intensity per um^2
  std::vector<double> cumulative_;  // encircled energy at i*dr
  double support_um_ = 0.0;
};

}  // namespace ionread::optics
