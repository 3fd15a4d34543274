"""
Pré-treino auto-supervisionado de TabTransformers para dados tabulares

Módulos:
    numerics_utils: primitivas numéricas, atenção, AdamW e decaimento por cosseno
    data_utils: ingestão, codificação, discretização e particionamento
    model_utils: variantes do TabTransformer e persistência de pesos
    ssl_utils: mascaramento de células e pré-treino por reconstrução
    train_utils: fine-tuning, baselines, regimes e validação cruzada
    harness_utils: planos de experimento, relatórios e linha de comando
"""

__version__ = "0.1.0"
