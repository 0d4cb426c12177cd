#include "thetaguard/errors.hpp"

#include <exception>

namespace thetaguard {

void rethrow_with_context(const std::string& context) {
    try {
        throw;
    } catch (const DataError& e) {
        throw DataError(context + ": " + e.what());
    } catch (const NumericalError& e) {
        throw NumericalError(context + ": " + e.what());
    } catch (const UsageError& e) {
        throw UsageError(context + ": " + e.what());
    }
}

} // namespace thetaguard
