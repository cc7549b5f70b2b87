#pragma once

#include "linsem/adam.hpp"
#include "linsem/archive.hpp"
#include "linsem/experiments.hpp"
#include "linsem/generator.hpp"
#include "linsem/geometry.hpp"
#include "linsem/latentopt.hpp"
#include "linsem/metrics.hpp"
#include "linsem/nse.hpp"
#include "linsem/probe.hpp"
#include "linsem/rng.hpp"
#include "linsem/tensor.hpp"
#include "linsem/train.hpp"
#include "linsem/upsample.hpp"
#include "linsem/wire.hpp"
