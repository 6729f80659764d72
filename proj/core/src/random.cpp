#include "charnmt/random.hpp"

#include <sstream>

#include "charnmt/error.hpp"

namespace charnmt::inline CHARNMT_ABI {

std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void set_rng_state(Rng& rng, const std::string& state) {
  std::istringstream is(state);
  Rng r;
  is >> r;
  if (is.fail()) throw DataError("malformed random generator state");
  rng = r;
}

}  // namespace charnmt
