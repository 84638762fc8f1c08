"""Virtual-node processing for data-parallel training."""
