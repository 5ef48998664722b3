"""AENet: attention-enforced cell segmentation on a numpy autograd-free engine."""
