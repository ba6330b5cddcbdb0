#pragma once

#include <map>
#include <string>

#include "opera/tape.hpp"

namespace opera::ad {

// Archive layout: magic "OPCK", u32 version=1, u32 tensor count; per tensor
// u16 name length, name bytes, u8 ndim, u32 dims..., f32 data little-endian.
// Text metadata (model configs) rides along as reserved "__meta__:<key>"
// entries holding one float per byte.
void save_checkpoint(const std::string& path, const ParamStore<float>& ps,
                     const std::map<std::string, std::string>& meta = {});

ParamStore<float> load_checkpoint(const std::string& path,
                                  std::map<std::string, std::string>* meta = nullptr);

}  // namespace opera::ad
