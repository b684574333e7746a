"""Interfacial transfer property packages for the absorber model.

The column balances only need, per stage: component mass-transfer rates
N_i (kmol/m^2 s, positive gas -> liquid), interfacial heat-transfer rates
Q_L and Q_G (kJ/m^2 s), and phase heat capacities.  Everything else
(film coefficients, equilibrium, reaction enhancement) is internal to the
package, so the balances never change when the package is swapped.

The default package uses:
  * constant film coefficients k_G, k_L for CO2,
  * a Henry-type linear gas/liquid equilibrium with an exponential
    temperature correction,
  * a pseudo-first-order enhancement factor E = sqrt(k2*c_MEA*D)/k_L,
  * a constant heat of absorption released to the liquid film,
  * a gas-side heat-transfer coefficient from the Chilton-Colburn
    analogy, h_G = k_G * sum_i c_Gi cp_Gi,
  * N2 non-transferring; H2O and MEA transfer disabled by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Component index order used everywhere: CO2, N2, H2O, MEA.
CO2, N2, H2O, MEA = 0, 1, 2, 3
COMPONENTS = ("CO2", "N2", "H2O", "MEA")
N_COMPONENTS = 4

GAS_CONSTANT = 8.314  # kJ/kmol/K


class PropertyPackage:
    """Interface: per-stage interfacial transfer and heat capacity data."""

    def transfer_rates(self, c_l, c_g, t_l, t_g):
        """Return (N, Q_L, Q_G) for arrays of stage states.

        c_l, c_g have shape (n_stages, 4); t_l, t_g shape (n_stages,).
        N has shape (n_stages, 4) in kmol/m^2 s (positive = gas to liquid);
        Q_L, Q_G have shape (n_stages,) in kJ/m^2 s.
        """
        raise NotImplementedError

    def heat_capacities(self):
        """Return (cp_l, cp_g), each a length-4 array in kJ/kmol/K."""
        raise NotImplementedError

    def kernel_constants(self):
        """Flat float64 parameter vector for the compiled fast path.

        Packages that cannot be expressed through the default formulas
        return None; those run only through the plain-numpy balance path.
        """
        return None


@dataclass(frozen=True)
class DefaultPropertyPackage(PropertyPackage):
    """Documented constants table for the default transfer model.

    All values are effective lumped parameters chosen to give a plausible
    MEA absorber at the nominal flue-gas and solvent conditions (around
    85-90 % CO2 removal at liquid-to-gas volumetric ratios of a few
    tenths of a percent), not fitted correlations.
    """

    k_g: float = 4.5e-3          # gas film coefficient, m/s
    k_l: float = 1.0e-4          # liquid film coefficient (physical), m/s
    k2: float = 6.0e3            # effective rate constant CO2+MEA, m^3/kmol s
    diff_co2: float = 1.5e-9     # CO2 diffusivity in solvent, m^2/s
    henry_ref: float = 4.0e3     # dimensionless c_L*/c_G* at t_ref
    henry_slope: float = 0.045   # 1/K, d ln(He)/dT (He falls as T rises)
    t_ref: float = 314.0         # K, reference temperature for He
    heat_absorption: float = 8.2e4  # kJ/kmol CO2, released to liquid film
    gas_pressure: float = 101.325   # kPa, constant per stage
    liquid_molar_density: float = 43.1  # kmol/m^3 of the solvent
    # molar heat capacities, kJ/kmol/K, order CO2, N2, H2O, MEA
    cp_liquid: tuple = (1.35e2, 2.9e1, 7.53e1, 1.67e2)
    cp_gas: tuple = (3.7e1, 2.91e1, 3.36e1, 9.0e1)
    transfer_h2o: bool = False
    transfer_mea: bool = False
    k_g_h2o: float = 3.0e-3      # used only when transfer_h2o is set
    henry_h2o: float = 2.0e4     # crude linear partition for H2O

    def henry(self, t_l):
        """Dimensionless CO2 partition c_L*/c_G* at liquid temperature."""
        return self.henry_ref * np.exp(-self.henry_slope * (t_l - self.t_ref))

    def enhancement(self, c_mea):
        """Pseudo-first-order enhancement factor of the liquid film."""
        return np.sqrt(np.maximum(self.k2 * c_mea * self.diff_co2, 0.0)) / self.k_l

    def transfer_rates(self, c_l, c_g, t_l, t_g):
        c_l = np.atleast_2d(c_l)
        c_g = np.atleast_2d(c_g)
        t_l = np.atleast_1d(t_l)
        t_g = np.atleast_1d(t_g)
        n = np.zeros_like(c_l)
        he = self.henry(t_l)
        e_f = self.enhancement(c_l[:, MEA])
        # two-film CO2 flux, gas and (enhanced) liquid resistances in series
        n[:, CO2] = (he * c_g[:, CO2] - c_l[:, CO2]) / (
            1.0 / (e_f * self.k_l) + he / self.k_g
        )
        if self.transfer_h2o:
            n[:, H2O] = self.k_g_h2o * (c_g[:, H2O] - c_l[:, H2O] / self.henry_h2o)
        if self.transfer_mea:
            n[:, MEA] = self.k_g_h2o * (c_g[:, MEA] - c_l[:, MEA] / self.henry_h2o)
        cp_g = np.asarray(self.cp_gas)
        h_gl = self.k_g * (c_g @ cp_g)  # Chilton-Colburn analogy
        q_g = h_gl * (t_l - t_g)
        q_l = h_gl * (t_g - t_l) + self.heat_absorption * n[:, CO2]
        return n, q_l, q_g

    def heat_capacities(self):
        return np.asarray(self.cp_liquid, dtype=float), np.asarray(self.cp_gas, dtype=float)

    def kernel_constants(self):
        return np.array(
            [
                self.k_g,
                self.k_l,
                self.k2,
                self.diff_co2,
                self.henry_ref,
                self.henry_slope,
                self.t_ref,
                self.heat_absorption,
                1.0 if self.transfer_h2o else 0.0,
                1.0 if self.transfer_mea else 0.0,
                self.k_g_h2o,
                self.henry_h2o,
                *self.cp_liquid,
                *self.cp_gas,
            ],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class ZeroTransferPackage(PropertyPackage):
    """Stub with all interfacial transfer switched off (advection only)."""

    gas_pressure: float = 101.325
    liquid_molar_density: float = 43.1
    cp_liquid: tuple = (1.35e2, 2.9e1, 7.53e1, 1.67e2)
    cp_gas: tuple = (3.7e1, 2.91e1, 3.36e1, 9.0e1)

    def transfer_rates(self, c_l, c_g, t_l, t_g):
        c_l = np.atleast_2d(c_l)
        ns = c_l.shape[0]
        return np.zeros((ns, N_COMPONENTS)), np.zeros(ns), np.zeros(ns)

    def heat_capacities(self):
        return np.asarray(self.cp_liquid, dtype=float), np.asarray(self.cp_gas, dtype=float)

    def kernel_constants(self):
        base = DefaultPropertyPackage(
            k_g=0.0, k_l=1.0, k2=0.0, henry_ref=1.0, henry_slope=0.0,
            heat_absorption=0.0,
            cp_liquid=self.cp_liquid, cp_gas=self.cp_gas,
        )
        return base.kernel_constants()
