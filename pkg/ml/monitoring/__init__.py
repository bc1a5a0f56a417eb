# Model monitoring package
