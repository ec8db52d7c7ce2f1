// SPDX-License-Identifier: Apache-2.0
#include "unccache/kernels.hpp"

#include <stdexcept>

namespace unc::kern {

#if defined(UNCCACHE_HAVE_AVX2)
const KernelSet& avx2_impl();

static bool cpu_has_avx2() {
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}
#endif

bool lane_supported(Lane lane) {
    switch (lane) {
    case Lane::Auto:
    case Lane::Scalar:
        return true;
    case Lane::Avx2:
#if defined(UNCCACHE_HAVE_AVX2)
        return cpu_has_avx2();
#else
        return false;
#endif
    }
    return false;
}

const KernelSet* lane_set(Lane lane) {
    switch (lane) {
    case Lane::Scalar:
        return &scalar();
    case Lane::Avx2:
#if defined(UNCCACHE_HAVE_AVX2)
        if (cpu_has_avx2())
            return &avx2_impl();
#endif
        return nullptr;
    case Lane::Auto:
#if defined(UNCCACHE_HAVE_AVX2)
        if (cpu_has_avx2())
            return &avx2_impl();
#endif
        return &scalar();
    }
    return nullptr;
}

namespace {
const KernelSet*& active_slot() {
    static const KernelSet* slot = lane_set(Lane::Auto);
    return slot;
}
} // namespace

const KernelSet& active() {
    return *active_slot();
}

bool select(Lane lane) {
    const KernelSet* set = lane_set(lane);
    if (set == nullptr)
        return false;
    active_slot() = set;
    return true;
}

Lane parse_lane(const std::string& name) {
    if (name == "auto")
        return Lane::Auto;
    if (name == "scalar")
        return Lane::Scalar;
    if (name == "avx2")
        return Lane::Avx2;
    throw std::invalid_argument("unknown kernel lane: " + name);
}

} // namespace unc::kern
