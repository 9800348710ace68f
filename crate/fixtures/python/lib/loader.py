import h5py


def load(path):
    with h5py.File(path) as f:
        return {k: f[k][()] for k in f}
