"""Active deep learning for spatio-temporal electric load prediction."""
