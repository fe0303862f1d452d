#pragma once

#include "iclprobe/error.hpp"
#include "iclprobe/rng.hpp"
#include "iclprobe/tensor_io.hpp"
#include "iclprobe/model.hpp"
#include "iclprobe/prompt.hpp"
#include "iclprobe/induction.hpp"
#include "iclprobe/metrics.hpp"
#include "iclprobe/retrievers.hpp"
#include "iclprobe/stats.hpp"
#include "iclprobe/dataset.hpp"
#include "iclprobe/capture.hpp"
#include "iclprobe/toy_circuits.hpp"
#include "iclprobe/experiment.hpp"
