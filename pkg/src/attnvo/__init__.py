"""Self-attention visual odometry: SE(3) tools, CNN-LSTM pose regression, KITTI metrics
and saliency analyses."""

__version__ = "0.1.0"
