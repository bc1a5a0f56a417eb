# Minimal reverse-mode autodiff package
