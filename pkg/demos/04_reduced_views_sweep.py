# coding: utf-8

# # Fewer training views
#
# The same scan is fitted with shrinking training fractions. Test views are
# whatever the split leaves out, so every fraction is scored on its own
# held-out set.

# In[1]:

import tempfile
from pathlib import Path

from ctsplat.dataset import Dataset
from ctsplat.geometry import ScanGeometry
from ctsplat.metrics import sweep_fractions, sweep_table
from ctsplat.phantom import make_head_phantom, project_orbit
from ctsplat.trainer import TrainConfig, split_views


# In[2]:

geom = ScanGeometry(image_width=32, image_height=32, n_views=40, angular_step_deg=9.0)
images, _ = project_orbit(make_head_phantom((32, 32, 32), seed=0), geom)
data = Dataset.from_images(geom, images)

for f in (0.5, 0.25, 0.1):
    train_idx, test_idx = split_views(len(data), f)
    print(f, "train", train_idx[:6].tolist(), "...", len(test_idx), "held out")


# In[3]:

config = TrainConfig(iterations=300, n_init=2000, checkpoint_interval=0)
reports = sweep_fractions(data, [0.5, 0.25, 0.1], config, out_dir=Path(tempfile.mkdtemp()))
print(sweep_table(reports))
