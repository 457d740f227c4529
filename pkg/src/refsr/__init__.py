"""Reference-guided image super-resolution toolkit.

Recovers high-frequency detail twice over: an internal inference network
(IHN) sharpens a plainly upsampled image, and detail extracted from
retrieved, registered high-resolution reference images is fused back in
through adaptive patch matching.
"""

__version__ = "0.1.0"
