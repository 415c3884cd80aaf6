#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "n2n/networks.hpp"
#include "n2n/phantom.hpp"
#include "n2n/registration.hpp"
#include "n2n/segmenter.hpp"

// Glue shared by the CLI and the acceptance suite.
namespace n2n::pipeline {

// Source/target modality slices of one subject through the 256 pipeline.
struct SlicePairs {
  std::vector<Image> source;
  std::vector<Image> target;
};
SlicePairs generation_pairs(const data::LoadedSubject& subject, int side = 256);

// Crops A, B and labels with one foreground box (from A) to side^3, maps the
// landmarks into the cube. G(A) is computed on the native slices and cropped
// the same way.
reg::HarnessSubject harness_subject(const data::LoadedSubject& subject, nn::Generator<float>& generator,
                                    std::uint64_t seed, int side = 128);

// Native-resolution segmentation samples for one subject. `translated` may be
// empty when the spec does not use it.
std::vector<seg::SegSample> tms_samples(const data::LoadedSubject& subject, const std::vector<Image>& translated,
                                        const seg::ChannelSpec& spec);

// Native-resolution A slices of a subject run through the generator.
std::vector<Image> translate_native(nn::Generator<float>& generator, const Volume& given, std::uint64_t seed);

}  // namespace n2n::pipeline
