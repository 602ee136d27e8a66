#pragma once

#include "simmdg/analysis.hpp"
#include "simmdg/config.hpp"
#include "simmdg/diffcalc.hpp"
#include "simmdg/errors.hpp"
#include "simmdg/harness.hpp"
#include "simmdg/inference.hpp"
#include "simmdg/losses.hpp"
#include "simmdg/model.hpp"
#include "simmdg/optim.hpp"
#include "simmdg/rng.hpp"
#include "simmdg/synthgen.hpp"
#include "simmdg/version.hpp"
