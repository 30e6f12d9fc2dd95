from __future__ import annotations
from dataclasses import dataclass, field, fields
from typing import Any, Literal, Mapping

import numpy as np
import pandas as pd


TipoAlgoritmo = Literal["mlp", "decision-tree", "gaussian-nb", "linear-svm"]
TipoColumna = Literal["continuous", "categorical"]

ALGORITMOS: tuple[str, ...] = ("mlp", "decision-tree", "gaussian-nb", "linear-svm")
TIPOS_COLUMNA: tuple[str, ...] = ("continuous", "categorical")


def congelar(valores: Any, dtype=float) -> np.ndarray:
    """Copia a un array de solo lectura."""
    arr = np.array(valores, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# ==========================================================
# Aprendices
# ==========================================================
@dataclass(frozen=True)
class LabelSpace:
    classes: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(str(c) for c in self.classes))
        if len(self.classes) < 2:
            raise ValueError("El espacio de etiquetas necesita al menos 2 clases.")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"Clases duplicadas en el espacio de etiquetas: {self.classes}")

    @property
    def n(self) -> int:
        return len(self.classes)

    def indice(self, clase: Any) -> int:
        try:
            return self.classes.index(str(clase))
        except ValueError:
            raise ValueError(f"Clase desconocida '{clase}' (clases: {list(self.classes)})") from None

    def one_hot(self, indice: int) -> np.ndarray:
        v = np.zeros(self.n)
        v[indice] = 1.0
        return v


@dataclass(frozen=True)
class ModelSpec:
    tipo: TipoAlgoritmo
    semilla: int = 0
    # mlp
    capas_ocultas: tuple[int, ...] = (64,)
    pendiente_negativa: float = 0.01
    tasa_aprendizaje: float = 0.01
    epocas: int = 200
    tam_lote: int = 32
    paciencia: int = 10
    fraccion_validacion: float = 0.1
    # arbol de decision
    min_muestras_hoja: int = 1
    profundidad_max: int | None = None
    suavizado_laplace: float = 1.0
    # svm lineal
    regularizacion: float = 0.01
    calibrar: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "capas_ocultas", tuple(int(c) for c in self.capas_ocultas))
        if self.tipo not in ALGORITMOS:
            raise ValueError(f"Algoritmo desconocido '{self.tipo}' (opciones: {', '.join(ALGORITMOS)})")
        if any(c <= 0 for c in self.capas_ocultas):
            raise ValueError("Los tamaños de capas ocultas deben ser positivos.")
        if self.min_muestras_hoja < 1:
            raise ValueError("min_muestras_hoja debe ser >= 1.")
        if self.profundidad_max is not None and self.profundidad_max < 0:
            raise ValueError("profundidad_max debe ser >= 0.")
        if self.epocas < 1 or self.tam_lote < 1 or self.paciencia < 1:
            raise ValueError("epocas, tam_lote y paciencia deben ser positivos.")
        if not 0.0 <= self.fraccion_validacion < 1.0:
            raise ValueError("fraccion_validacion debe estar en [0, 1).")
        if self.tasa_aprendizaje <= 0 or self.regularizacion <= 0:
            raise ValueError("tasa_aprendizaje y regularizacion deben ser positivas.")
        if self.suavizado_laplace < 0 or self.pendiente_negativa < 0:
            raise ValueError("suavizado_laplace y pendiente_negativa deben ser >= 0.")

    @classmethod
    def desde_dict(cls, data: Mapping[str, Any]) -> "ModelSpec":
        conocidos = {f.name for f in fields(cls)}
        extra = set(data) - conocidos
        if extra:
            raise ValueError(f"Hiperparámetros desconocidos: {sorted(extra)}")
        valores = dict(data)
        if "capas_ocultas" in valores:
            valores["capas_ocultas"] = tuple(valores["capas_ocultas"])
        return cls(**valores)

    def como_dict(self) -> dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["capas_ocultas"] = list(self.capas_ocultas)
        return out


@dataclass(frozen=True, eq=False)
class TrainedModel:
    spec: ModelSpec
    parametros: Mapping[str, np.ndarray]   # arrays de solo lectura
    label_space: LabelSpace
    dimension: int
    diferenciable: bool


# ==========================================================
# Espacio de atributos
# ==========================================================
@dataclass(frozen=True)
class ColumnSchema:
    nombre: str
    tipo: TipoColumna
    minimo: float | None = None
    maximo: float | None = None
    categorias: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "categorias", tuple(str(c) for c in self.categorias))
        if self.tipo not in TIPOS_COLUMNA:
            raise ValueError(f"Tipo de columna desconocido '{self.tipo}' en '{self.nombre}'")
        if self.tipo == "continuous":
            if self.minimo is None or self.maximo is None or not self.minimo < self.maximo:
                raise ValueError(f"Columna continua '{self.nombre}' necesita minimo < maximo")
        else:
            if not self.categorias:
                raise ValueError(f"Columna categórica '{self.nombre}' sin categorías")
            if len(set(self.categorias)) != len(self.categorias):
                raise ValueError(f"Categorías duplicadas en '{self.nombre}'")

    @property
    def ancho(self) -> int:
        return 1 if self.tipo == "continuous" else len(self.categorias)


@dataclass(frozen=True)
class DatasetSchema:
    columnas: tuple[ColumnSchema, ...]
    columna_clase: str
    clases: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "columnas", tuple(self.columnas))
        object.__setattr__(self, "clases", tuple(str(c) for c in self.clases))
        nombres = [c.nombre for c in self.columnas]
        if len(set(nombres)) != len(nombres):
            raise ValueError("Nombres de columna duplicados en el esquema.")
        if self.columna_clase in nombres:
            raise ValueError(f"La columna de clase '{self.columna_clase}' no puede ser un atributo.")

    @property
    def dimension(self) -> int:
        return sum(c.ancho for c in self.columnas)

    def columna(self, nombre: str) -> ColumnSchema | None:
        for c in self.columnas:
            if c.nombre == nombre:
                return c
        return None

    def desplazamientos(self) -> dict[str, int]:
        """Posición inicial del bloque codificado de cada columna."""
        out, pos = {}, 0
        for c in self.columnas:
            out[c.nombre] = pos
            pos += c.ancho
        return out


@dataclass(frozen=True, eq=False)
class Dataset:
    schema: DatasetSchema
    raw: pd.DataFrame
    X: np.ndarray            # filas x dimension codificada, en [0,1]
    y: np.ndarray            # indices en label_space
    label_space: LabelSpace
    nombre: str = ""

    def __len__(self) -> int:
        return int(self.X.shape[0])


# ==========================================================
# Optimizacion
# ==========================================================
@dataclass(frozen=True)
class ObjectiveEvaluation:
    valor: float
    gradiente: np.ndarray | None = None


@dataclass(frozen=True)
class OptimizerBudget:
    max_iter_adam: int = 500
    max_iter_pso: int = 200
    tolerancia: float = 1e-10
    paciencia: int = 20
    # pso
    particulas: int = 40
    inercia: float = 0.72
    cognitivo: float = 1.49
    social: float = 1.49
    dispersion_inicial: float = 0.25
    velocidad_max: float = 0.2
    # adam
    paso: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    reducciones: int = 3        # veces que se parte el paso al estancarse
    semilla: int = 0

    def __post_init__(self) -> None:
        if self.max_iter_adam < 0 or self.max_iter_pso < 0:
            raise ValueError("Las iteraciones máximas no pueden ser negativas.")
        if self.particulas < 1 or self.paciencia < 1 or self.reducciones < 0:
            raise ValueError("particulas y paciencia deben ser positivas; reducciones >= 0.")
        if self.tolerancia <= 0:
            raise ValueError("La tolerancia debe ser > 0.")
        if min(self.inercia, self.cognitivo, self.social, self.dispersion_inicial, self.velocidad_max) < 0:
            raise ValueError("Los coeficientes de PSO deben ser >= 0.")
        if self.paso <= 0 or self.epsilon <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Parámetros de Adam inválidos.")


@dataclass(frozen=True)
class ResultadoLambda:
    valor: float
    convergio: bool
    ensayados: tuple[float, ...] = ()


# ==========================================================
# Destilacion
# ==========================================================
Instancia = tuple[str, int]     # (dataset, indice)


@dataclass(frozen=True)
class ExpertiseSet:
    modelo: str
    indices: frozenset[Instancia]


@dataclass(frozen=True)
class TeachingSet:
    maestro: str
    alumno: str
    indices: frozenset[Instancia]


@dataclass(frozen=True, eq=False)
class CounterfactualTarget:
    y_prima: np.ndarray
    alfa: float
    prediccion: np.ndarray   # f_i(x)
    etiqueta: np.ndarray     # one-hot de la clase verdadera

    @property
    def clase(self) -> int:
        return int(np.argmax(self.etiqueta))


@dataclass(frozen=True)
class ClaveRegistro:
    maestro: str
    alumno: str
    dataset: str
    indice: int


@dataclass(frozen=True, eq=False)
class CounterfactualRecord:
    maestro: str
    alumno: str
    dataset: str
    indice: int
    x_prima: np.ndarray
    y_prima: np.ndarray
    etiqueta: int
    ajuste: float            # |f_i(x') - y'|^2
    distancia: float         # Manhattan en el espacio del maestro
    convergio: bool
    x_origen: np.ndarray | None = None   # solo local: nunca viaja entre sitios

    @property
    def clave(self) -> ClaveRegistro:
        return ClaveRegistro(self.maestro, self.alumno, self.dataset, self.indice)


@dataclass(frozen=True)
class FeatureMask:
    indices: tuple[int, ...]
    fraccion: float = 1.0

    def __post_init__(self) -> None:
        if not self.indices:
            raise ValueError("La máscara no puede ser vacía.")


@dataclass(frozen=True, eq=False)
class Participante:
    """Lo que un modelo aporta a la destilación: el modelo, su esquema y sus máscaras por clase."""
    nombre: str
    modelo: TrainedModel
    esquema: DatasetSchema
    mascaras: Mapping[int, FeatureMask] = field(default_factory=dict)


# ==========================================================
# Reporte
# ==========================================================
@dataclass(frozen=True, eq=False)
class EntradaDelta:
    maestro: str
    alumno: str
    clases: tuple[str, ...]
    medias: np.ndarray               # (C, d) media de x' - x por clase
    conteos: tuple[int, ...]
    vacias: tuple[bool, ...]
    diferencia: np.ndarray | None    # delta+ - delta- (solo binario)


@dataclass(frozen=True, eq=False)
class DistillationReport:
    modelos: tuple[str, ...]
    exactitud_antes: Mapping[str, float]
    exactitud_despues: Mapping[str, float]
    conteos: np.ndarray              # filas alumnos, columnas maestros
    deltas: tuple[EntradaDelta, ...]
    atributos: Mapping[str, tuple[str, ...]]   # nombres codificados por alumno
    tasa_convergencia: float
    generados: int
    lambdas: Mapping[tuple[str, str, str], float]
    exactitud_agrupada: Mapping[str, float] | None = None
    tiempos: Mapping[str, float] = field(default_factory=dict)

    def recibidos(self, alumno: str) -> int:
        return int(self.conteos[self.modelos.index(alumno)].sum())
