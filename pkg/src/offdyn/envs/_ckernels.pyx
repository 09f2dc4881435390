# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled environment step kernels; see _pykernels.py for the reference version."""
from libc.math cimport floor, sqrt

BACKEND = "cython"


cdef inline double _f32(double x) noexcept:
    return <double>(<float>x)


cdef inline double _clip(double x, double lo, double hi) noexcept:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


def f32(double x):
    return _f32(x)


cdef inline void _point(double* s, double ax, double ay, double dt, double accel, double mu,
                        double g, double vmax, double lox, double hix, double loy, double hiy,
                        double half) noexcept:
    cdef double damp, nvx, nvy, nx, ny
    ax = _clip(_clip(ax, -1.0, 1.0), lox, hix)
    ay = _clip(_clip(ay, -1.0, 1.0), loy, hiy)
    damp = 1.0 - mu * dt
    nvx = _clip(s[2] * damp + (ax * accel) * dt, -vmax, vmax)
    nvy = _clip(s[3] * damp + (ay * accel - g) * dt, -vmax, vmax)
    nx = s[0] + nvx * dt
    ny = s[1] + nvy * dt
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
    s[0] = _f32(nx)
    s[1] = _f32(ny)
    s[2] = _f32(nvx)
    s[3] = _f32(nvy)


def point_step(double x, double y, double vx, double vy, double ax, double ay, double dt,
               double accel, double mu, double g, double vmax, double lox, double hix,
               double loy, double hiy, double half):
    cdef double s[4]
    s[0] = x
    s[1] = y
    s[2] = vx
    s[3] = vy
    _point(s, ax, ay, dt, accel, mu, g, vmax, lox, hix, loy, hiy, half)
    return s[0], s[1], s[2], s[3]


cdef inline bint _blocked(const unsigned char[:, :] grid, double x, double y) noexcept:
    cdef Py_ssize_t h = grid.shape[0]
    cdef Py_ssize_t w = grid.shape[1]
    cdef Py_ssize_t r, c
    if x < 0.0 or y < 0.0 or x >= w or y >= h:
        return True
    c = <Py_ssize_t>floor(x)
    r = h - 1 - <Py_ssize_t>floor(y)
    return grid[r, c] != 0


def maze_step(double x, double y, double vx, double vy, double ax, double ay, double dt,
              double accel, double mu, double vmax, double lox, double hix, double loy,
              double hiy, const unsigned char[:, :] grid, double margin):
    cdef double damp, nvx, nvy, nx, ny
    ax = _clip(_clip(ax, -1.0, 1.0), lox, hix)
    ay = _clip(_clip(ay, -1.0, 1.0), loy, hiy)
    damp = 1.0 - mu * dt
    nvx = _clip(vx * damp + (ax * accel) * dt, -vmax, vmax)
    nvy = _clip(vy * damp + (ay * accel) * dt, -vmax, vmax)
    nx = x + nvx * dt
    if _blocked(grid, nx, y):
        if nvx > 0.0:
            nx = floor(nx) - margin
        else:
            nx = floor(nx) + 1.0 + margin
        nvx = 0.0
    ny = y + nvy * dt
    if _blocked(grid, nx, ny):
        if nvy > 0.0:
            ny = floor(ny) - margin
        else:
            ny = floor(ny) + 1.0 + margin
        nvy = 0.0
    return _f32(nx), _f32(ny), _f32(nvx), _f32(nvy)


def reacher_step(double t1, double t2, double w1, double w2, double a1, double a2, double dt,
                 double force, double mu, double inertia1, double inertia2, double wmax,
                 double lo1, double hi1, double lo2, double hi2,
                 double jlo1, double jhi1, double jlo2, double jhi2):
    cdef double nw1, nw2, nt1, nt2
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
    return _f32(nt1), _f32(nt2), _f32(nw1), _f32(nw2)


def point_rollout_random(double x, double y, double vx, double vy, const double[:, :] actions,
                         double dt, double accel, double mu, double g, double vmax, double lox,
                         double hix, double loy, double hiy, double half, double gx, double gy):
    cdef double s[4]
    cdef double total = 0.0
    cdef Py_ssize_t i
    s[0] = x
    s[1] = y
    s[2] = vx
    s[3] = vy
    for i in range(actions.shape[0]):
        _point(s, actions[i, 0], actions[i, 1], dt, accel, mu, g, vmax, lox, hix, loy, hiy, half)
        total += -sqrt((s[0] - gx) * (s[0] - gx) + (s[1] - gy) * (s[1] - gy))
    return total
