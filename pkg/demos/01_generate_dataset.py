# coding: utf-8

# # Simulating a CT scan
#
# A small head phantom is built from nested ellipsoids, then projected with a
# cone-beam DRR (additive line integrals) around a circular orbit. The views
# go to disk as 16-bit PNGs next to a JSON manifest.

# In[1]:

import tempfile
from pathlib import Path

import numpy as np

from ctsplat.dataset import Dataset
from ctsplat.geometry import ScanGeometry, orbit_poses
from ctsplat.phantom import generate_dataset, make_head_phantom


# 32 views every 11.25 degrees, 48x48 detector pixels, a 48^3 voxel phantom.

# In[2]:

geom = ScanGeometry(image_width=48, image_height=48, n_views=32, angular_step_deg=11.25)
phantom = make_head_phantom((48, 48, 48), seed=0, fov_side=geom.fov_side)
print("phantom", phantom.dims, "attenuation range", phantom.values.min(), phantom.values.max())


# Camera poses follow the OpenCV convention: +z looks at the isocenter and
# world +z shows up as "up" in every image.

# In[3]:

poses = orbit_poses(geom)
print("first source at", np.round(poses[0].camera_center, 1))
print("quarter turn at", np.round(poses[8].camera_center, 1))


# In[4]:

out = Path(tempfile.mkdtemp()) / "head"
manifest = generate_dataset(phantom, geom, out)
print(sorted(p.name for p in out.iterdir()))
print(len(list((out / "views").glob("*.png"))), "views written")


# Images are normalized by the largest line integral of the scan, so the
# brightest pixel of the orbit is exactly 1.

# In[5]:

data = Dataset.load(out / "manifest.json")
print("image stack", data.images.shape, "max", data.images.max())
print("angles", data.angles_deg[:4], "...")
