"""Pure-Python environment step kernels.

Mirror of ``_ckernels.pyx`` operation for operation; states are rounded to
float32 after every step so both backends produce identical trajectories.
"""
import math
import struct

_pack = struct.Struct("f")

BACKEND = "python"


def f32(x):
    return _pack.unpack(_pack.pack(x))[0]


def _clip(x, lo, hi):
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


def point_step(x, y, vx, vy, ax, ay, dt, accel, mu, g, vmax, lox, hix, loy, hiy, half):
    ax = _clip(_clip(ax, -1.0, 1.0), lox, hix)
    ay = _clip(_clip(ay, -1.0, 1.0), loy, hiy)
    damp = 1.0 - mu * dt
    nvx = _clip(vx * damp + (ax * accel) * dt, -vmax, vmax)
    nvy = _clip(vy * damp + (ay * accel - g) * dt, -vmax, vmax)
    nx = x + nvx * dt
    ny = y + nvy * dt
    if nx < -half:
        nx = -half
        nvx = 0.0
    elif nx > half:
        nx = half
        nvx = 0.0
    if ny < -half:
        ny = -half
        nvy = 0.0
    elif ny > half:
        ny = half
        nvy = 0.0
    return f32(nx), f32(ny), f32(nvx), f32(nvy)


def _blocked(grid, x, y):
    h = len(grid)
    w = len(grid[0])
    if x < 0.0 or y < 0.0 or x >= w or y >= h:
        return True
    c = int(math.floor(x))
    r = h - 1 - int(math.floor(y))
    return grid[r][c] != 0


def maze_step(x, y, vx, vy, ax, ay, dt, accel, mu, vmax, lox, hix, loy, hiy, grid, margin):
    ax = _clip(_clip(ax, -1.0, 1.0), lox, hix)
    ay = _clip(_clip(ay, -1.0, 1.0), loy, hiy)
    damp = 1.0 - mu * dt
    nvx = _clip(vx * damp + (ax * accel) * dt, -vmax, vmax)
    nvy = _clip(vy * damp + (ay * accel) * dt, -vmax, vmax)
    nx = x + nvx * dt
    if _blocked(grid, nx, y):
        if nvx > 0.0:
            nx = math.floor(nx) - margin
        else:
            nx = math.floor(nx) + 1.0 + margin
        nvx = 0.0
    ny = y + nvy * dt
    if _blocked(grid, nx, ny):
        if nvy > 0.0:
            ny = math.floor(ny) - margin
        else:
            ny = math.floor(ny) + 1.0 + margin
        nvy = 0.0
    return f32(nx), f32(ny), f32(nvx), f32(nvy)


def reacher_step(t1, t2, w1, w2, a1, a2, dt, force, mu, inertia1, inertia2, wmax,
                 lo1, hi1, lo2, hi2, jlo1, jhi1, jlo2, jhi2):
    a1 = _clip(_clip(a1, -1.0, 1.0), lo1, hi1)
    a2 = _clip(_clip(a2, -1.0, 1.0), lo2, hi2)
    nw1 = _clip(w1 + ((a1 * force - mu * w1) / inertia1) * dt, -wmax, wmax)
    nw2 = _clip(w2 + ((a2 * force - mu * w2) / inertia2) * dt, -wmax, wmax)
    nt1 = t1 + nw1 * dt
    nt2 = t2 + nw2 * dt
    if nt1 < jlo1:
        nt1 = jlo1
        nw1 = 0.0
    elif nt1 > jhi1:
        nt1 = jhi1
        nw1 = 0.0
    if nt2 < jlo2:
        nt2 = jlo2
        nw2 = 0.0
    elif nt2 > jhi2:
        nt2 = jhi2
        nw2 = 0.0
    return f32(nt1), f32(nt2), f32(nw1), f32(nw2)


def point_rollout_random(x, y, vx, vy, actions, dt, accel, mu, g, vmax, lox, hix, loy, hiy, half, gx, gy):
    """Roll a fixed action sequence (n, 2) and return the summed distance reward."""
    total = 0.0
    for i in range(len(actions)):
        x, y, vx, vy = point_step(x, y, vx, vy, float(actions[i][0]), float(actions[i][1]),
                                  dt, accel, mu, g, vmax, lox, hix, loy, hiy, half)
        total += -math.sqrt((x - gx) * (x - gx) + (y - gy) * (y - gy))
    return total
