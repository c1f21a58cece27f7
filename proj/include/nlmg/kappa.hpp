#pragma once

#include "nlmg/common.hpp"

#include <cmath>

namespace nlmg
{

/**
   @brief Pressure-dependent scalar permeability multiplier kappa(p) and its
   derivative.

   Supported laws:
     - constant:     kappa = 1
     - exponential:  kappa = exp(alpha * p)
     - richards:     kappa = alpha / (alpha + |p - z|^beta), evaluated at the
                     pressure head psi = p - z with z the height of the cell
                     (or aggregate) the value belongs to. k0 is the reference
                     conductivity magnitude carried by the permeability field.

   For the richards law with beta > 1 the derivative at psi = 0 is the true
   one-sided limit, which is zero.
*/
struct KappaLaw
{
    enum class Kind
    {
        constant,
        exponential,
        richards
    };

    Kind kind = Kind::constant;
    double alpha = 0.0;
    double beta = 0.0;
    double k0 = 1.0;

    static KappaLaw constant() { return KappaLaw{}; }

    static KappaLaw exponential(double alpha)
    {
        KappaLaw law;
        law.kind = Kind::exponential;
        law.alpha = alpha;
        return law;
    }

    static KappaLaw richards(double alpha, double beta, double k0)
    {
        require(alpha > 0 && beta > 0 && k0 > 0, "richards law: parameters must be positive");
        KappaLaw law;
        law.kind = Kind::richards;
        law.alpha = alpha;
        law.beta = beta;
        law.k0 = k0;
        return law;
    }

    double eval(double p, double z = 0.0) const
    {
        switch (kind)
        {
            case Kind::constant: return 1.0;
            case Kind::exponential: return std::exp(alpha * p);
            case Kind::richards:
            {
                const double psi = p - z;
                return alpha / (alpha + std::pow(std::abs(psi), beta));
            }
        }
        return 1.0;
    }

    double derivative(double p, double z = 0.0) const
    {
        switch (kind)
        {
            case Kind::constant: return 0.0;
            case Kind::exponential: return alpha * std::exp(alpha * p);
            case Kind::richards:
            {
                const double psi = p - z;
                if (psi == 0.0) { return 0.0; }
                const double apb = alpha + std::pow(std::abs(psi), beta);
                const double sign = psi > 0.0 ? 1.0 : -1.0;
                return -alpha * beta * std::pow(std::abs(psi), beta - 1.0) * sign / (apb * apb);
            }
        }
        return 0.0;
    }

    double inv(double p, double z = 0.0) const { return 1.0 / eval(p, z); }

    /// d(1/kappa)/dp; closed form per law, cheaper and better conditioned
    /// than -kappa'/kappa^2 for the richards law.
    double inv_derivative(double p, double z = 0.0) const
    {
        switch (kind)
        {
            case Kind::constant: return 0.0;
            case Kind::exponential: return -alpha * std::exp(-alpha * p);
            case Kind::richards:
            {
                const double psi = p - z;
                if (psi == 0.0) { return 0.0; }
                const double sign = psi > 0.0 ? 1.0 : -1.0;
                return beta * std::pow(std::abs(psi), beta - 1.0) * sign / alpha;
            }
        }
        return 0.0;
    }
};

} // namespace nlmg
