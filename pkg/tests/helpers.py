"""Duck-typed stand-ins for ``ModelBundle`` with closed-form behavior."""

import numpy as np

from latentguard import autodiff as ad
from latentguard.nets import normalize


class VectorStub:
    """Images are plain vectors; the autoencoder and the condition head are
    identities and the embedding is L2 normalization."""

    dtype = np.float64

    def __init__(self, dim=4):
        self.dim = dim

    def encode(self, x):
        return ad.as_tensor(x)

    def decode(self, z):
        return ad.as_tensor(z)

    def embed_identity(self, x):
        return normalize(ad.as_tensor(x))

    def condition_from_image(self, x):
        return ad.as_tensor(x)


class LinearStub(VectorStub):
    """``eps(z, t, c) = A c`` scaled per step by ``k[t]``; ``z`` is ignored.

    With ``W`` the condition is ``c(x) = W x`` instead of ``x``.
    """

    def __init__(self, A, k=None, W=None):
        super().__init__(A.shape[1])
        self.A = ad.Tensor(np.asarray(A, dtype=np.float64))
        self.k = k or {}
        self.W = None if W is None else ad.Tensor(np.asarray(W, dtype=np.float64).T)

    def condition_from_image(self, x):
        x = ad.as_tensor(x)
        return x if self.W is None else x @ self.W

    def denoise(self, z_t, t, c):
        z_t = ad.as_tensor(z_t)
        out = ad.as_tensor(c) @ ad.Tensor(self.A.data.T)
        out = ad.broadcast(out, z_t.shape[:-1] + (self.A.shape[0],))
        if self.k:
            scale = np.array([self.k[int(s)] for s in np.atleast_1d(t)], dtype=np.float64)
            out = out * ad.Tensor(scale.reshape(np.shape(t) + (1,)))
        return out
