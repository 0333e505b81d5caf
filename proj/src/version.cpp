#include "fixslot/version.hpp"

namespace fixslot {

const char* version() { return "fixslot 0.1.0"; }

}  // namespace fixslot
