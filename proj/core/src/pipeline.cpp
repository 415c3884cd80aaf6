#include "n2n/pipeline.hpp"

#include "n2n/error.hpp"
#include "n2n/trainer.hpp"
#include "n2n/volume_io.hpp"

namespace n2n::pipeline {

SlicePairs generation_pairs(const data::LoadedSubject& subject, int side) {
  return {io::generation_slices(subject.vol_a, side), io::generation_slices(subject.vol_b, side)};
}

reg::HarnessSubject harness_subject(const data::LoadedSubject& subject, nn::Generator<float>& generator,
                                    std::uint64_t seed, int side) {
  const auto box = io::foreground_box(subject.vol_a);
  reg::HarnessSubject h;
  h.id = subject.id;
  for (const auto& s : io::slice_volume(io::crop_resize(subject.vol_a, box, side))) h.given.push_back(quantize_u8(s));
  for (const auto& s : io::slice_volume(io::crop_resize(subject.vol_b, box, side))) h.target.push_back(quantize_u8(s));
  h.labels = io::slice_labels(io::crop_resize(subject.labels, box, side, true));
  // translate at native geometry (what G was trained on), then crop like the rest
  const Volume translated = io::stack_slices(translate_native(generator, subject.vol_a, seed), DType::Float32);
  for (const auto& s : io::slice_volume(io::crop_resize(translated, box, side))) h.translated.push_back(quantize_u8(s));
  for (const auto& lm : subject.landmarks) {
    const auto p = io::map_to_cube({lm.z, lm.y, lm.x}, box, side);
    h.landmarks.push_back({lm.name, p[2], p[1], p[0]});
  }
  return h;
}

std::vector<Image> translate_native(nn::Generator<float>& generator, const Volume& given, std::uint64_t seed) {
  std::vector<Image> slices;
  for (const auto& s : io::slice_volume(given)) slices.push_back(quantize_u8(s));
  return train::translate(generator, slices, false, seed);
}

std::vector<seg::SegSample> tms_samples(const data::LoadedSubject& subject, const std::vector<Image>& translated,
                                        const seg::ChannelSpec& spec) {
  const auto given = io::slice_volume(subject.vol_a);
  const auto labels = io::slice_labels(subject.labels);
  bool needs_translated = false;
  for (auto s : spec) needs_translated = needs_translated || s == seg::Source::Translated;
  if (needs_translated && translated.size() != given.size()) {
    throw ContractError("subject '" + subject.id + "': " + std::to_string(translated.size()) +
                        " translated slices for " + std::to_string(given.size()) + " given slices");
  }
  std::vector<seg::SegSample> out;
  for (std::size_t k = 0; k < given.size(); ++k) {
    const auto g = io::normalize(quantize_u8(given[k]));
    const auto t = needs_translated ? io::normalize(translated[k]) : g;
    out.push_back({seg::compose_tms(g, t, spec), labels[k]});
  }
  return out;
}

}  // namespace n2n::pipeline
