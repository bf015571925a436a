// Copyright (c) 2026 the refmc authors.
// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.

#pragma once

#include "refmc/brdf.hpp"
#include "refmc/core.hpp"
#include "refmc/dataset.hpp"
#include "refmc/dual.hpp"
#include "refmc/envmap.hpp"
#include "refmc/geometry.hpp"
#include "refmc/image_io.hpp"
#include "refmc/integrator.hpp"
#include "refmc/optimizer.hpp"
#include "refmc/rng.hpp"
#include "refmc/sampling.hpp"
#include "refmc/scene.hpp"
#include "refmc/texture.hpp"
