#include "diffusereg/random.hpp"

#include <sstream>

#include "diffusereg/errors.hpp"

namespace dreg {

std::string Rng::state() const {
    std::ostringstream os;
    os.precision(17);
    os << engine_ << ' ' << normal_ << ' ' << uniform_;
    return os.str();
}

void Rng::restore(const std::string& state) {
    std::istringstream is(state);
    is >> engine_ >> normal_ >> uniform_;
    if (!is) throw ArgumentError("Rng::restore: malformed state string");
}

DeformationField random_normal_field(Shape3 s, Rng& rng, bool normalized) {
    DeformationField f(s, normalized);
    for (double& v : f.disp) v = rng.normal();
    return f;
}

}  // namespace dreg
