#pragma once

#include "cprobe/attribution.hpp"
#include "cprobe/binary_io.hpp"
#include "cprobe/concepts.hpp"
#include "cprobe/detect.hpp"
#include "cprobe/errors.hpp"
#include "cprobe/image_io.hpp"
#include "cprobe/lrp.hpp"
#include "cprobe/metrics.hpp"
#include "cprobe/model.hpp"
#include "cprobe/parallel.hpp"
#include "cprobe/render.hpp"
#include "cprobe/synth.hpp"
#include "cprobe/tensor.hpp"
#include "cprobe/train.hpp"
#include "cprobe/zoo.hpp"
