"""Scene representation: Gaussian primitives, cameras, spherical harmonics.

Fields are struct-of-arrays torch tensors so the whole pipeline stays
differentiable; single-primitive views exist for inspection and tests.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import torch

# real SH basis constants (l = 0..3)
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

PROVENANCE_TAGS = ("dark", "global-enhanced", "bright")


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def degree_from_coeffs(n: int) -> int:
    for deg in range(4):
        if num_sh_coeffs(deg) == n:
            return deg
    raise ValueError(f"{n} coefficients does not match any SH degree 0..3")


def sh_basis(dirs: torch.Tensor, degree: int) -> torch.Tensor:
    """Real SH basis values for unit directions, shape (..., (degree+1)^2)."""
    if not 0 <= degree <= 3:
        raise ValueError(f"SH degree {degree} outside 0..3")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [torch.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]
    return torch.stack(out, dim=-1)


def sh_eval(sh: torch.Tensor, dirs: torch.Tensor, validate: bool = True) -> torch.Tensor:
    """Evaluate SH color. sh: (..., 3, n_coeffs), dirs: (..., 3) unit -> (..., 3)."""
    degree = degree_from_coeffs(sh.shape[-1])
    if validate:
        norms = torch.linalg.norm(dirs, dim=-1)
        if not torch.all((norms - 1.0).abs() < 1e-4):
            raise ValueError("directions must be unit length within 1e-4")
    basis = sh_basis(dirs, degree)  # (..., n)
    return torch.einsum("...cn,...n->...c", sh, basis)


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternion (w, x, y, z) -> rotation matrix; batched (..., 4) -> (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def quat_from_rotmat(R: torch.Tensor) -> torch.Tensor:
    """Rotation matrix -> unit quaternion (w, x, y, z), w >= 0; batched.

    Shepperd's method: pick the largest of the four squared components from
    the diagonal so the division below never loses precision.
    """
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    tr = m00 + m11 + m22
    cand = torch.stack([tr, m00, m11, m22], dim=-1)
    case = cand.argmax(dim=-1)

    def build(idx: int) -> torch.Tensor:
        if idx == 0:
            s = torch.sqrt((1.0 + tr).clamp(min=1e-12)) * 2.0
            return torch.stack([0.25 * s,
                                (R[..., 2, 1] - R[..., 1, 2]) / s,
                                (R[..., 0, 2] - R[..., 2, 0]) / s,
                                (R[..., 1, 0] - R[..., 0, 1]) / s], dim=-1)
        if idx == 1:
            s = torch.sqrt((1.0 + m00 - m11 - m22).clamp(min=1e-12)) * 2.0
            return torch.stack([(R[..., 2, 1] - R[..., 1, 2]) / s, 0.25 * s,
                                (R[..., 0, 1] + R[..., 1, 0]) / s,
                                (R[..., 0, 2] + R[..., 2, 0]) / s], dim=-1)
        if idx == 2:
            s = torch.sqrt((1.0 - m00 + m11 - m22).clamp(min=1e-12)) * 2.0
            return torch.stack([(R[..., 0, 2] - R[..., 2, 0]) / s,
                                (R[..., 0, 1] + R[..., 1, 0]) / s, 0.25 * s,
                                (R[..., 1, 2] + R[..., 2, 1]) / s], dim=-1)
        s = torch.sqrt((1.0 - m00 - m11 + m22).clamp(min=1e-12)) * 2.0
        return torch.stack([(R[..., 1, 0] - R[..., 0, 1]) / s,
                            (R[..., 0, 2] + R[..., 2, 0]) / s,
                            (R[..., 1, 2] + R[..., 2, 1]) / s, 0.25 * s], dim=-1)

    q = build(0)
    for idx in (1, 2, 3):
        q = torch.where((case == idx).unsqueeze(-1), build(idx), q)
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    return torch.where(q[..., 0:1] < 0, -q, q)


def covariance_from(scale: torch.Tensor, rot: torch.Tensor) -> torch.Tensor:
    """World covariance R * diag(scale^2) * R^T; batched (..., 3), (..., 4) -> (..., 3, 3)."""
    if torch.any(scale <= 0):
        raise ValueError("scale components must be positive")
    norms = torch.linalg.norm(rot, dim=-1)
    err = (norms - 1.0).abs()
    if torch.any(err > 1e-6):
        if torch.any(err > 1e-3):
            raise ValueError("quaternion norm deviates from 1 by more than 1e-3")
        warnings.warn("re-normalizing slightly non-unit quaternion", stacklevel=2)
        rot = rot / norms.unsqueeze(-1)
    R = quat_to_rotmat(rot)
    S2 = torch.diag_embed(scale * scale)
    return R @ S2 @ R.transpose(-1, -2)


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    R: torch.Tensor  # (3, 3) world-to-camera rotation
    t: torch.Tensor  # (3,) world-to-camera translation
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        eye = torch.eye(3, dtype=self.R.dtype)
        if (self.R @ self.R.T - eye).abs().max() > 1e-6:
            raise ValueError("rotation not orthonormal within 1e-6")

    @property
    def position(self) -> torch.Tensor:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def to(self, dtype: torch.dtype) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy,
                      self.R.to(dtype), self.t.to(dtype),
                      self.width, self.height, self.near, self.far)


def world_to_cam(points: torch.Tensor, cam: Camera) -> torch.Tensor:
    return points @ cam.R.T + cam.t


def project(mu: torch.Tensor, sigma: torch.Tensor, cam: Camera):
    """EWA first-order projection of world Gaussians to screen space.

    Returns (mean2d (N,2), cov2d (N,2,2), depth (N,), valid (N,) bool).
    Behind-camera or out-of-clip primitives get valid=False (culled marker);
    their math runs on a depth clamped to near so no NaN enters autograd.
    """
    p = world_to_cam(mu, cam)
    depth = p[..., 2]
    valid = (depth > cam.near) & (depth < cam.far)
    z = depth.clamp(min=cam.near)
    x, y = p[..., 0], p[..., 1]

    mean2d = torch.stack([cam.cx + cam.fx * x / z, cam.cy + cam.fy * y / z], dim=-1)

    inv_z = 1.0 / z
    zero = torch.zeros_like(z)
    # Jacobian of (fx*x/z, fy*y/z) w.r.t. camera-space point
    J = torch.stack([
        torch.stack([cam.fx * inv_z, zero, -cam.fx * x * inv_z * inv_z], dim=-1),
        torch.stack([zero, cam.fy * inv_z, -cam.fy * y * inv_z * inv_z], dim=-1),
    ], dim=-2)  # (N, 2, 3)

    sigma_cam = cam.R @ sigma @ cam.R.T
    cov2d = J @ sigma_cam @ J.transpose(-1, -2)
    # low-pass floor: +0.3 px^2 on the diagonal
    floor = 0.3 * torch.eye(2, dtype=cov2d.dtype)
    cov2d = cov2d + floor
    return mean2d, cov2d, depth, valid


def unproject(px: torch.Tensor, depth: torch.Tensor, cam: Camera) -> torch.Tensor:
    """Pixel coords (..., 2) + depth (...) -> world points (..., 3)."""
    d = torch.as_tensor(depth)
    if torch.any(d <= cam.near) or torch.any(d >= cam.far):
        raise ValueError("depth outside (near, far)")
    x = (px[..., 0] - cam.cx) / cam.fx * d
    y = (px[..., 1] - cam.cy) / cam.fy * d
    p_cam = torch.stack([x, y, d], dim=-1)
    return (p_cam - cam.t) @ cam.R


@dataclass
class GaussianPrimitive:
    mu: torch.Tensor
    rot: torch.Tensor
    scale: torch.Tensor
    density: torch.Tensor
    opacity: torch.Tensor
    sh: torch.Tensor  # (3, n_coeffs)


@dataclass
class GaussianField:
    mu: torch.Tensor       # (N, 3)
    rot: torch.Tensor      # (N, 4) unit quaternions
    scale: torch.Tensor    # (N, 3) positive
    density: torch.Tensor  # (N,) rho >= 0
    opacity: torch.Tensor  # (N,) alpha in [0, 1]
    sh: torch.Tensor       # (N, 3, n_coeffs)
    provenance: str = "dark"

    def __post_init__(self) -> None:
        if self.provenance not in PROVENANCE_TAGS:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def sh_degree(self) -> int:
        return degree_from_coeffs(self.sh.shape[-1])

    @property
    def bounds(self) -> tuple[torch.Tensor, torch.Tensor]:
        if len(self) == 0:
            z = torch.zeros(3, dtype=self.mu.dtype)
            return z, z
        return self.mu.min(dim=0).values, self.mu.max(dim=0).values

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.mu[i], self.rot[i], self.scale[i],
                                 self.density[i], self.opacity[i], self.sh[i])

    def validate(self) -> "GaussianField":
        if len(self) == 0:
            raise ValueError("field is empty")
        if torch.any((torch.linalg.norm(self.rot, dim=-1) - 1.0).abs() > 1e-6):
            raise ValueError("non-unit quaternion in field")
        if torch.any(self.scale <= 0):
            raise ValueError("non-positive scale in field")
        if torch.any(self.opacity < 0) or torch.any(self.opacity > 1):
            raise ValueError("opacity outside [0, 1]")
        if torch.any(self.density < 0):
            raise ValueError("negative density")
        if not torch.all(torch.isfinite(self.sh)):
            raise ValueError("non-finite SH coefficients")
        lo, hi = self.bounds
        if torch.any(self.mu < lo) or torch.any(self.mu > hi):
            raise ValueError("bounds do not contain all centers")
        return self

    def detach(self) -> "GaussianField":
        return GaussianField(self.mu.detach(), self.rot.detach(), self.scale.detach(),
                             self.density.detach(), self.opacity.detach(),
                             self.sh.detach(), self.provenance)

    def clone(self) -> "GaussianField":
        return GaussianField(self.mu.clone(), self.rot.clone(), self.scale.clone(),
                             self.density.clone(), self.opacity.clone(),
                             self.sh.clone(), self.provenance)

    def with_provenance(self, tag: str) -> "GaussianField":
        return replace(self, provenance=tag)

    def to(self, dtype: torch.dtype) -> "GaussianField":
        return GaussianField(self.mu.to(dtype), self.rot.to(dtype), self.scale.to(dtype),
                             self.density.to(dtype), self.opacity.to(dtype),
                             self.sh.to(dtype), self.provenance)


def concat_fields(fields: list[GaussianField], provenance: str | None = None) -> GaussianField:
    tag = provenance if provenance is not None else fields[0].provenance
    return GaussianField(
        mu=torch.cat([f.mu for f in fields]),
        rot=torch.cat([f.rot for f in fields]),
        scale=torch.cat([f.scale for f in fields]),
        density=torch.cat([f.density for f in fields]),
        opacity=torch.cat([f.opacity for f in fields]),
        sh=torch.cat([f.sh for f in fields]),
        provenance=tag,
    )
