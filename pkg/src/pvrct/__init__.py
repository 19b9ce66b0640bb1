"""CT-volume-to-outcome pipeline: preprocessing, mini 3D CNNs, focal loss, Grad-CAM."""
