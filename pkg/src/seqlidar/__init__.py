from seqlidar.tensor import Tensor, backward, no_grad
