#pragma once

// Umbrella header: the whole library. Individual headers can be included
// directly; each one pulls in only what it needs.

#include "diva/common.hpp"
#include "diva/tensor.hpp"
#include "diva/nn.hpp"
#include "diva/quant.hpp"
#include "diva/adapt.hpp"
#include "diva/attack.hpp"
#include "diva/differential.hpp"
#include "diva/distill.hpp"
#include "diva/defend.hpp"
#include "diva/data.hpp"
#include "diva/checkpoint.hpp"
#include "diva/metrics.hpp"
#include "diva/config.hpp"
#include "diva/runner.hpp"
