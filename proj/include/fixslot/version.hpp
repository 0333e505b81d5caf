#pragma once

namespace fixslot {

const char* version();

}  // namespace fixslot
