#include "car/io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace car {

std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) {
        // Trim surrounding whitespace.
        const auto b = field.find_first_not_of(" \t\r");
        const auto e = field.find_last_not_of(" \t\r");
        out.push_back(b == std::string::npos ? std::string() : field.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_double(const std::string& s, long line_no) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
        throw InvalidArgument("line " + std::to_string(line_no) + ": bad numeric value '" + s +
                              "'");
    }
    return v;
}

} // namespace

LoadedDataset read_dataset_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw InvalidArgument("cannot open " + path);
    }
    std::string line;
    long line_no = 0;

    if (!std::getline(in, line)) {
        throw InvalidArgument("line 1: empty file");
    }
    ++line_no;
    std::vector<std::string> header = split_csv_line(line);

    int k = 0;
    std::size_t pos = 0;
    while (pos < header.size() && header[pos] == "x" + std::to_string(pos + 1)) {
        ++pos;
        ++k;
    }
    bool has_y = pos < header.size() && header[pos] == "y";
    if (has_y) ++pos;
    bool has_t = pos < header.size() && header[pos] == "t";
    if (has_t) ++pos;
    if (pos != header.size()) {
        throw InvalidArgument("line 1: header must be x1,...,xK[,y][,t]; got unexpected column '" +
                              header[pos] + "'");
    }
    const std::size_t ncols = header.size();

    std::vector<std::vector<double>> rows;
    std::vector<double> yvals;
    std::vector<int> tvals;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
        std::vector<std::string> fields = split_csv_line(line);
        if (fields.size() != ncols) {
            throw InvalidArgument("line " + std::to_string(line_no) + ": expected " +
                                  std::to_string(ncols) + " fields, got " +
                                  std::to_string(fields.size()));
        }
        std::vector<double> xs(static_cast<std::size_t>(k));
        for (int j = 0; j < k; ++j) {
            xs[static_cast<std::size_t>(j)] = parse_double(fields[static_cast<std::size_t>(j)], line_no);
        }
        rows.push_back(std::move(xs));
        std::size_t f = static_cast<std::size_t>(k);
        if (has_y) yvals.push_back(parse_double(fields[f++], line_no));
        if (has_t) {
            const std::string& tv = fields[f];
            if (tv != "0" && tv != "1") {
                throw InvalidArgument("line " + std::to_string(line_no) +
                                      ": t column must be 0 or 1, got '" + tv + "'");
            }
            tvals.push_back(tv == "1" ? 1 : 0);
        }
    }
    if (rows.empty()) {
        throw InvalidArgument("line " + std::to_string(line_no + 1) + ": no data rows");
    }

    LoadedDataset out;
    const int n = static_cast<int>(rows.size());
    out.data.x.resize(n, k);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < k; ++j) {
            out.data.x(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        }
    }
    if (has_y) {
        Eigen::VectorXd y(n);
        for (int i = 0; i < n; ++i) y[i] = yvals[static_cast<std::size_t>(i)];
        out.data.y = std::move(y);
    }
    if (has_t) {
        Eigen::VectorXi t(n);
        for (int i = 0; i < n; ++i) t[i] = tvals[static_cast<std::size_t>(i)];
        out.assignment = Assignment::from_vector(std::move(t));
    }
    return out;
}

void write_dataset_csv(const std::string& path, const Dataset& data,
                       const Assignment* assignment) {
    std::ofstream outf(path);
    if (!outf) {
        throw InvalidArgument("cannot write " + path);
    }
    const int n = data.n();
    const int k = data.covariate_count();
    for (int j = 0; j < k; ++j) {
        if (j) outf << ',';
        outf << 'x' << (j + 1);
    }
    if (data.y) outf << (k ? "," : "") << 'y';
    if (assignment) outf << ",t";
    outf << '\n';
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < k; ++j) {
            if (j) outf << ',';
            outf << format_double(data.x(i, j));
        }
        if (data.y) outf << (k ? "," : "") << format_double((*data.y)[i]);
        if (assignment) outf << ',' << assignment->t[i];
        outf << '\n';
    }
}

void write_assignment_csv(const std::string& path, const Assignment& assignment) {
    std::ofstream outf(path);
    if (!outf) {
        throw InvalidArgument("cannot write " + path);
    }
    outf << "unit,t\n";
    for (int i = 0; i < assignment.n(); ++i) {
        outf << (i + 1) << ',' << assignment.t[i] << '\n';
    }
}

} // namespace car
