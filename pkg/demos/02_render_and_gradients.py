# coding: utf-8

# # Rendering Gaussians and their gradients
#
# A Gaussian cloud is splatted into a projection view with EWA splatting and
# front-to-back compositing over 16x16 tiles. The backward pass returns
# gradients for every parameter group, checked here against central
# differences.

# In[1]:

import numpy as np

from ctsplat.geometry import ScanGeometry, pose_at_angle
from ctsplat.losses import LossWeights, total_loss
from ctsplat.rasterizer import rasterize, render, render_backward
from ctsplat.scene import GaussianCloud


# In[2]:

rng = np.random.default_rng(3)
n = 4
cloud = GaussianCloud(
    rng.uniform(-6, 6, (n, 3)),        # positions (mm)
    np.log(rng.uniform(3, 6, (n, 3))),  # log scales
    rng.standard_normal((n, 4)),        # quaternions (w, x, y, z), normalized on use
    rng.uniform(-1, 1, n),              # opacity logits
    rng.uniform(0.2, 0.8, n),           # intensities
    10.0,                               # scene extent
)
geom = ScanGeometry(detector_width=40.0, detector_height=40.0, image_width=16,
                    image_height=16, fov_side=30.0)
pose = pose_at_angle(geom, 30.0)


# `render` clamps to [0, 1] and returns an image with its opacity map;
# `rasterize` keeps the raw values and the tile lists for the backward pass.

# In[3]:

img = render(cloud, pose)
print("pixel range", img.pixels.min().round(4), img.pixels.max().round(4))
print("opacity range", img.opacity.min().round(4), img.opacity.max().round(4))


# In[4]:

target = np.zeros((16, 16))
res = rasterize(cloud, pose)
rep = total_loss(res, target, LossWeights(0.8, 0.2, 1e-3, 1e-4))
print("total", round(rep.total, 5), "l1", round(rep.l1, 5), "dssim", round(rep.dssim, 5),
      "tv", round(rep.tv, 5), "beta", round(rep.beta, 5))
g = render_backward(cloud, pose, d_pixels=rep.d_pixels, d_opacity=rep.d_opacity, ctx=res)


# Central difference on the x position of the first Gaussian.

# In[5]:

def loss_at(c):
    return total_loss(rasterize(c, pose), target, LossWeights(0.8, 0.2, 1e-3, 1e-4)).total

h = 1e-5
x0 = cloud.positions[0, 0]
cloud.positions[0, 0] = x0 + h
up = loss_at(cloud)
cloud.positions[0, 0] = x0 - h
down = loss_at(cloud)
cloud.positions[0, 0] = x0
print("analytic", g.positions[0, 0], "finite difference", (up - down) / (2 * h))
