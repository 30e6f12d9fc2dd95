from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from infra.logger import get_logger
from logic.modelos import ObjectiveEvaluation, OptimizerBudget, ResultadoLambda


log = get_logger("optimizacion")

Caja = tuple[float, float]
ObjetivoGradiente = Callable[[np.ndarray], ObjectiveEvaluation]
ObjetivoLote = Callable[[np.ndarray], np.ndarray]     # (n, d) -> (n,)


class ErrorOptimizacion(ValueError):
    pass


def _indices_libres(d: int, mascara: Sequence[int] | None) -> np.ndarray:
    if mascara is None:
        return np.arange(d)
    libres = np.unique(np.asarray(list(mascara), dtype=int))
    if libres.size == 0:
        raise ErrorOptimizacion("La máscara no puede ser vacía.")
    if libres.min() < 0 or libres.max() >= d:
        raise ErrorOptimizacion(f"Índices de máscara fuera de rango para dimension {d}")
    return libres


def _inicio(start: np.ndarray, caja: Caja) -> np.ndarray:
    x = np.asarray(start, dtype=float).copy()
    if x.ndim != 1:
        raise ErrorOptimizacion("El punto inicial debe ser un vector.")
    if np.any(x < caja[0]) or np.any(x > caja[1]):
        raise ErrorOptimizacion("El punto inicial está fuera de la caja.")
    return x


def _finito(ev: ObjectiveEvaluation) -> bool:
    return bool(np.isfinite(ev.valor) and ev.gradiente is not None and np.all(np.isfinite(ev.gradiente)))


def adam_minimize(
    objetivo: ObjetivoGradiente,
    start: np.ndarray,
    budget: OptimizerBudget = OptimizerBudget(),
    caja: Caja = (0.0, 1.0),
    mascara: Sequence[int] | None = None,
) -> tuple[np.ndarray, float]:
    """Adam proyectado sobre la caja; devuelve el mejor iterado visto.

    Cuando el mejor valor no baja al menos `tolerancia` durante `paciencia`
    iteraciones seguidas, reinicia desde el mejor iterado con la mitad del
    paso (hasta `reducciones` veces) y después corta. También corta al
    agotar `max_iter_adam` iteraciones en total.
    """
    x = _inicio(start, caja)
    libres = _indices_libres(x.size, mascara)
    ev = objetivo(x)
    if not _finito(ev):
        raise ErrorOptimizacion("Objetivo o gradiente no finito en el punto inicial.")

    mejor_x, mejor, mejor_ev = x.copy(), float(ev.valor), ev
    paso = budget.paso
    reducciones = budget.reducciones
    m = np.zeros(libres.size)
    v = np.zeros(libres.size)
    t = sin_mejora = 0
    for it in range(1, budget.max_iter_adam + 1):
        t += 1
        g = np.asarray(ev.gradiente, dtype=float)[libres]
        m = budget.beta1 * m + (1 - budget.beta1) * g
        v = budget.beta2 * v + (1 - budget.beta2) * g * g
        m_hat = m / (1 - budget.beta1 ** t)
        v_hat = v / (1 - budget.beta2 ** t)
        x[libres] = np.clip(x[libres] - paso * m_hat / (np.sqrt(v_hat) + budget.epsilon), *caja)

        ev = objetivo(x)
        if not _finito(ev):
            log.debug("Adam: objetivo no finito en la iteración %d, se conserva el mejor iterado", it)
            break
        if ev.valor < mejor - budget.tolerancia:
            sin_mejora = 0
        else:
            sin_mejora += 1
        if ev.valor < mejor:
            mejor_x, mejor, mejor_ev = x.copy(), float(ev.valor), ev
        if sin_mejora >= budget.paciencia:
            if reducciones == 0:
                break
            # estancado: vuelve al mejor iterado con paso más fino y momentos limpios
            reducciones -= 1
            paso /= 2.0
            x, ev = mejor_x.copy(), mejor_ev
            m = np.zeros(libres.size)
            v = np.zeros(libres.size)
            t = sin_mejora = 0
    return mejor_x, mejor


def pso_minimize(
    objetivo: ObjetivoLote,
    start: np.ndarray,
    budget: OptimizerBudget = OptimizerBudget(),
    caja: Caja = (0.0, 1.0),
    mascara: Sequence[int] | None = None,
) -> tuple[np.ndarray, float]:
    """Enjambre de partículas alrededor de `start` (una partícula exactamente en él).

    `objetivo` evalúa un lote de puntos. Las coordenadas fuera de la máscara
    quedan congeladas en los valores de `start`.
    """
    x0 = _inicio(start, caja)
    libres = _indices_libres(x0.size, mascara)
    f0 = float(np.asarray(objetivo(x0[None, :]), dtype=float)[0])
    if not np.isfinite(f0):
        raise ErrorOptimizacion("Objetivo no finito en el punto inicial.")
    if budget.max_iter_pso == 0:
        return x0, f0

    rng = np.random.default_rng(budget.semilla)
    S, k = budget.particulas, libres.size
    lo, hi = caja
    vmax = budget.velocidad_max * (hi - lo)

    pos = np.tile(x0, (S, 1))
    pos[1:, libres] += rng.uniform(-budget.dispersion_inicial, budget.dispersion_inicial, size=(S - 1, k))
    pos = np.clip(pos, lo, hi)
    vel = np.zeros((S, x0.size))
    vel[:, libres] = rng.uniform(-vmax, vmax, size=(S, k))

    def evaluar(P: np.ndarray) -> np.ndarray:
        f = np.asarray(objetivo(P), dtype=float)
        return np.where(np.isfinite(f), f, np.inf)

    fx = evaluar(pos)
    fx[0] = f0
    mejor_pos, mejor_f = pos.copy(), fx.copy()
    i = int(np.argmin(mejor_f))
    g_pos, g_f = mejor_pos[i].copy(), float(mejor_f[i])

    sin_mejora = 0
    for _ in range(budget.max_iter_pso):
        rp = rng.uniform(size=(S, k))
        rg = rng.uniform(size=(S, k))
        v = vel[:, libres]
        v = (
            budget.inercia * v
            + budget.cognitivo * rp * (mejor_pos[:, libres] - pos[:, libres])
            + budget.social * rg * (g_pos[libres] - pos[:, libres])
        )
        vel[:, libres] = np.clip(v, -vmax, vmax)
        pos[:, libres] = np.clip(pos[:, libres] + vel[:, libres], lo, hi)

        fx = evaluar(pos)
        mejora = fx < mejor_f
        mejor_pos[mejora] = pos[mejora]
        mejor_f[mejora] = fx[mejora]

        i = int(np.argmin(mejor_f))
        if mejor_f[i] < g_f - budget.tolerancia:
            sin_mejora = 0
        else:
            sin_mejora += 1
        if mejor_f[i] < g_f:
            g_pos, g_f = mejor_pos[i].copy(), float(mejor_f[i])
        if sin_mejora >= budget.paciencia:
            break

    return g_pos, g_f


def lambda_search(
    converge: Callable[[float], bool],
    inicio: float = 1.0,
    factor: float = 2.0,
    tope: float = 1024.0,
) -> ResultadoLambda:
    """Búsqueda por duplicación del mayor lambda que converge.

    `converge(lam)` corre el generador con ese lambda y dice si el término de
    ajuste quedó por debajo del umbral. Los fracasos antes del primer éxito no
    cortan la búsqueda; después del primer éxito, el primer fracaso la corta.
    """
    ensayados: list[float] = []
    mejor: float | None = None
    lam = inicio
    while lam <= tope * (1 + 1e-12):
        ensayados.append(lam)
        if converge(lam):
            mejor = lam
        elif mejor is not None:
            break
        lam *= factor

    if mejor is None:
        log.warning("Ningún lambda convergió (probados %s); se usa lambda=%g", ensayados, inicio)
        return ResultadoLambda(valor=inicio, convergio=False, ensayados=tuple(ensayados))
    return ResultadoLambda(valor=mejor, convergio=True, ensayados=tuple(ensayados))
