# Regenerates the reference NIfTI fixtures with nibabel (independent writer).
import numpy as np
import nibabel as nib
import os

here = os.path.dirname(os.path.abspath(__file__))

def ramp(dtype):
    # x-fastest linear index: value(x, y, z) = x + 3*(y + 4*z)
    return np.arange(60, dtype=dtype).reshape((5, 4, 3)).transpose(2, 1, 0)

for name, dtype in [("ramp_f32", np.float32), ("ramp_i16", np.int16), ("ramp_u8", np.uint8)]:
    img = nib.Nifti1Image(ramp(dtype), np.diag([0.5, 0.75, 1.25, 1.0]))
    img.header.set_data_dtype(dtype)
    img.header["pixdim"][1:4] = [0.5, 0.75, 1.25]
    img.header.set_qform(None, code=0)
    img.header.set_sform(None, code=0)
    img.header["scl_slope"] = 1.0
    img.header["scl_inter"] = 0.0
    nib.save(img, os.path.join(here, name + ".nii"))

img = nib.Nifti1Image(ramp(np.float32), np.diag([0.5, 0.75, 1.25, 1.0]))
img.header.set_qform(None, code=0)
img.header.set_sform(None, code=0)
nib.save(img, os.path.join(here, "ramp_f32.nii.gz"))

mask = np.zeros((3, 4, 5), dtype=np.uint8)
mask[1, 2, 3] = 1
mask[0, 0, 0] = 1
img = nib.Nifti1Image(mask, np.eye(4))
img.header.set_qform(None, code=0)
img.header.set_sform(None, code=0)
nib.save(img, os.path.join(here, "mask_u8.nii"))
