#pragma once

#include "fbspde/deepbsde.hpp"
#include "fbspde/dual.hpp"
#include "fbspde/fem.hpp"
#include "fbspde/harness.hpp"
#include "fbspde/mesh.hpp"
#include "fbspde/nn.hpp"
#include "fbspde/numkit.hpp"
#include "fbspde/problems.hpp"
#include "fbspde/random.hpp"
#include "fbspde/sde.hpp"
