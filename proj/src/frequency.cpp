#include "dumo/analysis.hpp"

#include "dumo/errors.hpp"

namespace dumo {

FrequencySplit frequency_split(const torch::Tensor& image, double cutoff) {
  if (!(cutoff > 0.0 && cutoff < 0.5)) throw ConfigError("frequency cutoff must lie in (0, 0.5)");
  if (image.dim() < 2) throw InputError("frequency_split needs at least two dimensions");
  torch::NoGradGuard no_grad;
  const auto x = image.to(torch::kFloat64);
  const auto h = x.size(-2), w = x.size(-1);
  const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  const auto fy = torch::fft::fftfreq(h, 1.0, opts).view({h, 1});
  const auto fx = torch::fft::fftfreq(w, 1.0, opts).view({1, w});
  const auto low_mask = (fy * fy + fx * fx).le(cutoff * cutoff).to(torch::kFloat64);

  const auto spectrum = torch::fft::fft2(x);
  const auto power = spectrum.abs().pow(2) / static_cast<double>(h * w);

  FrequencySplit out;
  out.low = torch::real(torch::fft::ifft2(spectrum * low_mask)).to(image.scalar_type());
  out.high = torch::real(torch::fft::ifft2(spectrum * (1.0 - low_mask))).to(image.scalar_type());
  out.profile.cutoff = cutoff;
  out.profile.low_energy = (power * low_mask).sum().item<double>();
  out.profile.high_energy = (power * (1.0 - low_mask)).sum().item<double>();
  return out;
}

}  // namespace dumo
