#pragma once

#include "ccenet/cca.hpp"
#include "ccenet/cgl.hpp"
#include "ccenet/checkpoint.hpp"
#include "ccenet/config.hpp"
#include "ccenet/data.hpp"
#include "ccenet/image_io.hpp"
#include "ccenet/layers.hpp"
#include "ccenet/losses.hpp"
#include "ccenet/metrics.hpp"
#include "ccenet/model.hpp"
#include "ccenet/ops.hpp"
#include "ccenet/optim.hpp"
#include "ccenet/tensor.hpp"
#include "ccenet/train.hpp"
