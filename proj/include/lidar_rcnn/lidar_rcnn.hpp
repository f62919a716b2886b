#pragma once

#include "lidar_rcnn/checkpoint.hpp"
#include "lidar_rcnn/commands.hpp"
#include "lidar_rcnn/config.hpp"
#include "lidar_rcnn/dataset.hpp"
#include "lidar_rcnn/encoding.hpp"
#include "lidar_rcnn/errors.hpp"
#include "lidar_rcnn/geometry.hpp"
#include "lidar_rcnn/metrics.hpp"
#include "lidar_rcnn/network.hpp"
#include "lidar_rcnn/parallel.hpp"
#include "lidar_rcnn/synthetic.hpp"
#include "lidar_rcnn/targets.hpp"
#include "lidar_rcnn/trainer.hpp"
