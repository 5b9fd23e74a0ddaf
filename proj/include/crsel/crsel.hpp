#pragma once

#include "crsel/backward.hpp"
#include "crsel/crselector.hpp"
#include "crsel/detect_eval.hpp"
#include "crsel/fixtures.hpp"
#include "crsel/gradcheck.hpp"
#include "crsel/heatmap.hpp"
#include "crsel/io.hpp"
#include "crsel/ops.hpp"
#include "crsel/rng.hpp"
#include "crsel/sca_head.hpp"
#include "crsel/tensor.hpp"
#include "crsel/warp.hpp"
#include "crsel/window.hpp"
