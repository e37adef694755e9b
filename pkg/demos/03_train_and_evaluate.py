# coding: utf-8

# # Fitting a Gaussian cloud to half of the views
#
# Even-indexed views train the model, odd-indexed views are held out. A short
# run on a tiny scan is enough to watch the loss fall; the acceptance suite
# does the full-size version.

# In[1]:

import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from ctsplat.dataset import Dataset
from ctsplat.formats import read_csv, read_ply
from ctsplat.geometry import ScanGeometry
from ctsplat.metrics import evaluate
from ctsplat.phantom import project_orbit, make_head_phantom
from ctsplat.trainer import TrainConfig, train


# In[2]:

geom = ScanGeometry(image_width=32, image_height=32, n_views=24, angular_step_deg=15.0)
images, _ = project_orbit(make_head_phantom((32, 32, 32), seed=0), geom)
data = Dataset.from_images(geom, images)


# Density control runs every 100 iterations from iteration 500 until
# `densify_until`, so this run gets a single clone/split/prune pass.

# In[3]:

config = TrainConfig(iterations=600, n_init=2000, densify_until=500, checkpoint_interval=0)
out = Path(tempfile.mkdtemp())
result = train(data, config, out_dir=out)
log = read_csv(out / "train_log.csv")
for row in log[::100]:
    print(int(row["iteration"]), round(row["l1"], 4), int(row["n_gaussians"]))


# In[4]:

report = evaluate(result.cloud, data, result.test_indices, 0.5, len(result.train_indices))
print(report.table())


# The PLY on disk is the same cloud, rounded to float32.

# In[5]:

stored = read_ply(out / "model.ply")
print(len(stored), "Gaussians,", (out / "model.ply").stat().st_size, "bytes")
print("max position change from float32 rounding",
      np.abs(stored.positions - result.cloud.positions).max())
