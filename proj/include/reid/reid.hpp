#pragma once

#include "reid/error.hpp"
#include "reid/tensor.hpp"
#include "reid/layers.hpp"
#include "reid/backbone.hpp"
#include "reid/head.hpp"
#include "reid/model.hpp"
#include "reid/datasets.hpp"
#include "reid/losses.hpp"
#include "reid/schedule.hpp"
#include "reid/image_io.hpp"
#include "reid/synthetic.hpp"
#include "reid/ranking.hpp"
#include "reid/kernel.hpp"
#include "reid/eval.hpp"
#include "reid/checkpoint.hpp"
#include "reid/trainer.hpp"
#include "reid/config.hpp"
#include "reid/commands.hpp"
