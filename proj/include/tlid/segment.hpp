#pragma once

#include <map>
#include <vector>

#include "tlid/audio.hpp"

namespace tlid {

/// Consecutive non-overlapping windows of `seg_seconds`; a shorter final
/// remainder is kept iff it lasts at least `min_tail_seconds`.
std::vector<AudioSegment> segment_fixed(const AudioSegment& audio, double seg_seconds = 3.0,
                                        double min_tail_seconds = 1.0);

/// For each length L, every full window of L seconds starting at multiples of
/// `stride_seconds`. Windows that would overrun the utterance are omitted.
std::map<double, std::vector<AudioSegment>> segment_sweep(const AudioSegment& audio,
                                                          const std::vector<double>& lengths_seconds,
                                                          double stride_seconds = 2.0);

}  // namespace tlid
