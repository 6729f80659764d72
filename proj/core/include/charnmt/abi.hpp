#pragma once

// Each precision build lives in its own inline namespace so that the 32-bit
// and 64-bit libraries can be linked into the same binary.
#ifdef CHARNMT_DOUBLE
#define CHARNMT_ABI f64
#else
#define CHARNMT_ABI f32
#endif
