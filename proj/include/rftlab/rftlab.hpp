#pragma once

#include "rftlab/bounds.hpp"
#include "rftlab/commands.hpp"
#include "rftlab/common.hpp"
#include "rftlab/config.hpp"
#include "rftlab/diagnostics.hpp"
#include "rftlab/grad.hpp"
#include "rftlab/gradflow.hpp"
#include "rftlab/policy.hpp"
#include "rftlab/reward.hpp"
#include "rftlab/rng.hpp"
#include "rftlab/serialize.hpp"
#include "rftlab/trainlab.hpp"
