"""Coefficients of the Dormand-Prince 8(5,3) embedded Runge-Kutta pair.

Hairer's DOP853 tableau (Hairer, Norsett & Wanner, "Solving Ordinary
Differential Equations I", 2nd ed.): 12 stages plus the first-same-as-last
evaluation, an 8th-order propagating solution and embedded 5th- and
3rd-order error estimators that are combined into one error norm.
"""

from __future__ import annotations

import numpy as np

N_STAGES = 12

C = np.array(
    [0.                 , 0.05260015195876773, 0.0789002279381516 , 0.1183503419072274 ,
 0.2816496580927726 , 0.3333333333333333 , 0.25               , 0.3076923076923077 ,
 0.6512820512820513 , 0.6                , 0.8571428571428571 , 1.                 ,
 1.                 ]
)

A = np.array(
    [[ 0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00],
 [ 5.2600151958767730e-02,  0.0000000000000000e+00,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00],
 [ 1.9725056984537900e-02,  5.9175170953613701e-02,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00],
 [ 2.9587585476806851e-02,  0.0000000000000000e+00,  8.8762756430420545e-02,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00],
 [ 2.4136513415926669e-01,  0.0000000000000000e+00, -8.8454947932828609e-01,
   9.2483400326179199e-01,  0.0000000000000000e+00,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00],
 [ 3.7037037037037035e-02,  0.0000000000000000e+00,  0.0000000000000000e+00,
   1.7082860872947386e-01,  1.2546768756682242e-01,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00],
 [ 3.7109375000000000e-02,  0.0000000000000000e+00,  0.0000000000000000e+00,
   1.7025221101954405e-01,  6.0216538980455959e-02, -1.7578125000000000e-02,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00],
 [ 3.7092000118504789e-02,  0.0000000000000000e+00,  0.0000000000000000e+00,
   1.7038392571223998e-01,  1.0726203044637328e-01, -1.5319437748624402e-02,
   8.2737891638140233e-03,  0.0000000000000000e+00,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00],
 [ 6.2411095871607569e-01,  0.0000000000000000e+00,  0.0000000000000000e+00,
  -3.3608926294469414e+00, -8.6821934684172597e-01,  2.7592099699446710e+01,
   2.0154067550477894e+01, -4.3489884181069961e+01,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00],
 [ 4.7766253643826434e-01,  0.0000000000000000e+00,  0.0000000000000000e+00,
  -2.4881146199716677e+00, -5.9029082683684297e-01,  2.1230051448181193e+01,
   1.5279233632882423e+01, -3.3288210968984863e+01, -2.0331201708508627e-02,
   0.0000000000000000e+00,  0.0000000000000000e+00,  0.0000000000000000e+00],
 [-9.3714243008598730e-01,  0.0000000000000000e+00,  0.0000000000000000e+00,
   5.1863724288440638e+00,  1.0914373489967295e+00, -8.1497870107469268e+00,
  -1.8520065659996959e+01,  2.2739487099350505e+01,  2.4936055526796523e+00,
  -3.0467644718982196e+00,  0.0000000000000000e+00,  0.0000000000000000e+00],
 [ 2.2733101475165380e+00,  0.0000000000000000e+00,  0.0000000000000000e+00,
  -1.0534495466737249e+01, -2.0008720582248625e+00, -1.7958931863118799e+01,
   2.7948884529419960e+01, -2.8589982771350235e+00, -8.8728569335306293e+00,
   1.2360567175794303e+01,  6.4339274601576357e-01,  0.0000000000000000e+00],
 [ 5.4293734116568765e-02,  0.0000000000000000e+00,  0.0000000000000000e+00,
   0.0000000000000000e+00,  0.0000000000000000e+00,  4.4503128927524092e+00,
   1.8915178993145003e+00, -5.8012039600105849e+00,  3.1116436695781990e-01,
  -1.5216094966251609e-01,  2.0136540080403034e-01,  4.4710615727772587e-02]]
)

B = np.array(
    [ 0.054293734116568765,  0.                  ,  0.                  ,  0.                  ,
  0.                  ,  4.450312892752409   ,  1.8915178993145003  , -5.801203960010585   ,
  0.3111643669578199  , -0.1521609496625161  ,  0.20136540080403034 ,  0.04471061572777259 ]
)

E3 = np.array(
    [-0.18980075407240762,  0.                 ,  0.                 ,  0.                 ,
  0.                 ,  4.450312892752409  ,  1.8915178993145003 , -5.801203960010585  ,
 -0.4226823213237919 , -0.1521609496625161 ,  0.20136540080403034,  0.02265179219836082,
  0.                 ]
)

E5 = np.array(
    [ 0.01312004499419488 ,  0.                  ,  0.                  ,  0.                  ,
  0.                  , -1.2251564463762044  , -0.4957589496572502  ,  1.6643771824549864  ,
 -0.35032884874997366 ,  0.3341791187130175  ,  0.08192320648511571 , -0.022355307863886294,
  0.                  ]
)
