#pragma once

// The fully convolutional core: a small strided backbone producing a
// two-level feature pyramid, per-location heads (classification, box,
// controller, embedding), the mask branch with relative coordinates, and the
// dynamic three-layer mask head.

#include "minivis/ad.hpp"
#include "minivis/common.hpp"
#include "minivis/syndata.hpp"

#include <string>
#include <vector>

namespace minivis::net {

struct ModelDims {
  int image_channels = 3;
  int backbone_channels = 16;
  int num_categories = 3;
  int embed_dim = 8;
  int mask_channels = 8;      // channels of the mask branch output
  int mask_mid_channels = 8;  // hidden width of the dynamic mask head
  std::vector<int> strides = {4, 8};
  int total_identities = 0;  // rows of the proxy matrix; 0 disables it

  int dynamic_in_channels() const { return mask_channels + 2; }
  int mask_stride() const { return strides.front(); }
  int max_stride() const { return strides.back(); }

  // Flat size of one dynamic filter: three 1x1 conv layers, weights + biases.
  int theta_dim() const {
    const int cin = dynamic_in_channels();
    const int cm = mask_mid_channels;
    return (cin * cm + cm) + (cm * cm + cm) + (cm + 1);
  }
};

struct PyramidLevel {
  int stride = 0;
  int h = 0;
  int w = 0;
  Mat feature;  // (channels x h*w), row-major pixel indexing
};

struct FeaturePyramid {
  std::vector<PyramidLevel> levels;
};

struct DynamicFilter {
  Vec theta;
};

struct MaskFeature {
  Mat f_mask;      // (mask_channels x h*w)
  Mat rel_coords;  // (2 x h*w)
  Mat combined;    // (mask_channels+2 x h*w)
  int h = 0;
  int w = 0;
};

struct Detection {
  int category = -1;
  double score = 0.0;
  Box box;
  DynamicFilter theta;
  Vec embedding;          // unit L2 norm
  Eigen::ArrayXXd mask;   // mask-grid resolution, values in (0,1)
  int level = 0;          // pyramid level index
  int loc_x = 0, loc_y = 0;  // grid cell on that level
};

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

ad::ParamStore init_params(const ModelDims& dims, std::uint64_t seed);

// ---------------------------------------------------------------------------
// forward pass
// ---------------------------------------------------------------------------

struct LevelForward {
  int stride = 0, h = 0, w = 0;
  ad::NodePtr feature;
  ad::NodePtr cls_logits;  // (K x h*w)
  ad::NodePtr box_raw;     // (4 x h*w), softplus(raw)*stride are the distances
  ad::NodePtr ctrl;        // (theta_dim x h*w)
  ad::NodePtr embed;       // (embed_dim x h*w), unnormalized
};

struct ForwardResult {
  std::vector<LevelForward> levels;
  ad::NodePtr f_mask;  // (mask_channels x mask_h*mask_w)
  int mask_h = 0, mask_w = 0;
};

// Runs the whole network on one image. Rejects sizes not divisible by the
// maximum stride.
ForwardResult forward(ad::Graph& g, ad::ParamStore& params, const syndata::Image& image, const ModelDims& dims);

// Backbone-only convenience returning plain feature values.
FeaturePyramid forward_pyramid(const syndata::Image& image, ad::ParamStore& params, const ModelDims& dims);

// ---------------------------------------------------------------------------
// relative coordinates and the dynamic mask head
// ---------------------------------------------------------------------------

// Grid laid out at `stride`, channel 0 = (x_grid - x)/S, channel 1 =
// (y_grid - y)/S with S = stride*8 and x_grid the cell center in image
// coordinates.
Mat rel_coords(double x, double y, int h, int w, int stride);

// General form: grid cells at `grid_stride`, normalizer supplied explicitly
// (the detection level's stride*8).
Mat rel_coords_grid(double x, double y, int h, int w, int grid_stride, double normalizer);

// Three dynamic 1x1 conv layers with ReLU between them and a sigmoid output.
// theta layout: [W1 row-major, b1, W2 row-major, b2, W3, b3].
Mat mask_head(const Mat& combined, const Vec& theta, const ModelDims& dims);

ad::NodePtr mask_head_node(ad::Graph& g, ad::NodePtr combined, ad::NodePtr theta, const ModelDims& dims);

// ---------------------------------------------------------------------------
// target assignment
// ---------------------------------------------------------------------------

struct LevelGeom {
  int stride = 0, h = 0, w = 0;
};

struct PyramidGeometry {
  std::vector<LevelGeom> levels;
  int mask_h = 0, mask_w = 0, mask_stride = 0;
  int image_h = 0, image_w = 0;
};

PyramidGeometry pyramid_geometry(const ModelDims& dims, int image_h, int image_w);

struct PositiveTarget {
  int level = 0;
  int loc_index = 0;  // row-major cell index on that level
  int identity = -1;
  int category = -1;
  Box box;
  Eigen::Vector4d ltrb;  // target distances from the location center
  double loc_cx = 0, loc_cy = 0;
  Mat gt_mask_ds;  // (1 x mask_h*mask_w), {0,1}, gt downsampled to the mask grid
};

struct FrameTargets {
  std::vector<Mat> cls_onehot;  // per level, (K x h*w)
  std::vector<PositiveTarget> positives;
};

// One positive location per instance: the cell nearest the box center on the
// level whose stride best matches the box scale. Cell collisions are resolved
// in favor of the larger box; the loser takes its nearest free cell.
FrameTargets assign_targets(const std::vector<syndata::InstanceAnnotation>& annotations, const PyramidGeometry& geom,
                            const ModelDims& dims);

// Downsample a full-resolution binary mask to the mask grid (block mean >= 0.5).
Mat downsample_mask(const Mask& mask, int block);

// Bilinear upsampling of a mask-grid probability map back to image size.
Eigen::ArrayXXd upsample_bilinear(const Eigen::ArrayXXd& src, int out_h, int out_w);

// ---------------------------------------------------------------------------
// detection
// ---------------------------------------------------------------------------

struct DetectConfig {
  double score_threshold = 0.3;
  double nms_iou = 0.6;
  int max_detections = 10;
};

struct ScoredBox {
  double score = 0;
  int category = -1;
  Box box;
};

// Greedy class-aware suppression over candidates pre-sorted by descending
// score; a candidate is dropped when its IoU with a kept candidate of the
// same category exceeds `iou_threshold`. Returns kept indices in order.
std::vector<std::size_t> greedy_nms(const std::vector<ScoredBox>& sorted, double iou_threshold, int max_keep);

std::vector<Detection> detect(const syndata::Image& image, ad::ParamStore& params, const ModelDims& dims,
                              const DetectConfig& cfg);

}  // namespace minivis::net
